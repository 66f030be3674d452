#![allow(dead_code)]

pub mod gradcases;
pub mod gradcheck;
pub mod oracles;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skygan::h2h::H2HSpec;
use skygan::haze::{build_dataset, BuildOptions, MANIFEST_FILE};
use skygan::hsc::CatalystSpec;
use skygan::i2i::I2ISpec;
use skygan::image::{save_image, ImageTensor};
use skygan::orchestrator::{RunConfig, SpectralSource, StageConfig};

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * c).map(|_| r.random::<f32>()).collect();
    ImageTensor::new(h, w, c, data).unwrap()
}

/// Smooth color fields crossed by darker stripes; a stand-in for an aerial scene.
pub fn scene(h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let base = 0.5 + 0.3 * ((fx * 6.0 + c as f32).sin() * (fy * 4.0 - c as f32 * 0.5).cos());
        let road = if (x / 16 + y / 24) % 3 == 0 { 0.15 } else { 0.0 };
        (base - road).clamp(0.0, 1.0)
    })
    .unwrap()
}

/// One 128x128 scene cut into four 64x64 tiles, each hazed at levels 2 and 4: 8 pairs.
pub fn toy_dataset(root: &Path) -> PathBuf {
    let src = root.join("src");
    save_image(&scene(128, 128), &src.join("scene.png")).unwrap();
    let out = root.join("dataset");
    let opts = BuildOptions { levels: vec![2, 4], tile: 64, stride: 64, seed: 7 };
    let m = build_dataset(&src, &out, &opts).unwrap();
    assert_eq!(m.pairs.len(), 8);
    out.join(MANIFEST_FILE)
}

/// Small networks sized for one CPU core.
pub fn toy_config(manifest: &Path, checkpoint_dir: &Path, steps: [u64; 3]) -> RunConfig {
    let mut c = RunConfig::new(manifest, SpectralSource::Fixtures { seed: 3, count: 8 }, checkpoint_dir);
    c.networks.h2h = H2HSpec { depth: 3, base_width: 8, disc_layers: 2, disc_width: 8, classifier_width: 4 };
    c.networks.hsc = CatalystSpec { residual_blocks: 4, width: 16 };
    c.networks.i2i = I2ISpec { depth: 3, base_width: 8, disc_layers: 2, disc_width: 8 };
    c.h2h = StageConfig { steps: steps[0], batch_size: 4, lr: 1e-3 };
    c.hsc = StageConfig { steps: steps[1], batch_size: 8, lr: 3e-3 };
    c.i2i = StageConfig { steps: steps[2], batch_size: 4, lr: 1e-3 };
    c.seed = 11;
    c
}

/// Even tinier networks for quick determinism checks.
pub fn micro_config(manifest: &Path, checkpoint_dir: &Path, steps: [u64; 3]) -> RunConfig {
    let mut c = toy_config(manifest, checkpoint_dir, steps);
    c.networks.h2h = H2HSpec { depth: 2, base_width: 4, disc_layers: 1, disc_width: 4, classifier_width: 2 };
    c.networks.hsc = CatalystSpec { residual_blocks: 1, width: 4 };
    c.networks.i2i = I2ISpec { depth: 2, base_width: 4, disc_layers: 1, disc_width: 4 };
    c.h2h.batch_size = 2;
    c.hsc.batch_size = 2;
    c.i2i.batch_size = 2;
    c
}
