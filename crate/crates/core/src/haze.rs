//! Plasma-fractal haze synthesis and hazy/clean dataset construction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{crop_tiles, load_image, save_image, DatasetPair, ImageTensor};
use crate::seed::{derive_seed, rng};

pub const MAX_EXPONENT: u32 = 12;

/// Square `(2^n + 1)^2` scalar field in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazeField {
    size: usize,
    values: Vec<f64>,
}

impl HazeField {
    /// Square field from row-major values; `size` need not be `2^n + 1`.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::InvalidImage(format!("{} values do not form a {size}x{size} field", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("field values must lie in [0, 1]".into()));
        }
        Ok(HazeField { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Diamond-square generator settings.
///
/// Random stream (one `ChaCha8Rng` per seed, each draw a uniform `f64` in `[0, 1)`):
/// the four corners in row-major order unless `corners` is given, then for each pass
/// `k = 0, 1, ...` every diamond centre in row-major order followed by every square
/// (edge-midpoint) cell in row-major order. Each displacement is `r_k (2u - 1)` with
/// `r_k = roughness * 2^-k`. Square cells on the border average their three in-grid
/// neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiamondSquare {
    pub exponent: u32,
    pub roughness: f64,
    pub corners: Option<[f64; 4]>,
}

impl DiamondSquare {
    pub fn new(exponent: u32, roughness: f64) -> Self {
        DiamondSquare { exponent, roughness, corners: None }
    }

    pub fn with_corners(mut self, corners: [f64; 4]) -> Self {
        self.corners = Some(corners);
        self
    }

    /// The raw field before normalization.
    pub fn generate_raw(&self, seed: u64) -> Result<HazeField> {
        if !(1..=MAX_EXPONENT).contains(&self.exponent) {
            return Err(Error::Config(format!(
                "diamond-square exponent {} outside 1..={MAX_EXPONENT}",
                self.exponent
            )));
        }
        let size = (1usize << self.exponent) + 1;
        let last = size - 1;
        let mut v = vec![0.0f64; size * size];
        let mut rng = rng(seed);
        let corners = match self.corners {
            Some(c) => c,
            None => std::array::from_fn(|_| rng.random::<f64>()),
        };
        v[0] = corners[0];
        v[last] = corners[1];
        v[last * size] = corners[2];
        v[last * size + last] = corners[3];

        let mut step = last;
        let mut pass = 0;
        while step > 1 {
            let half = step / 2;
            let r = self.roughness * 0.5f64.powi(pass);
            for y in (half..size).step_by(step) {
                for x in (half..size).step_by(step) {
                    let avg = (v[(y - half) * size + x - half]
                        + v[(y - half) * size + x + half]
                        + v[(y + half) * size + x - half]
                        + v[(y + half) * size + x + half])
                        / 4.0;
                    v[y * size + x] = avg + r * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            for y in (0..size).step_by(half) {
                let start = if (y / half).is_multiple_of(2) { half } else { 0 };
                for x in (start..size).step_by(step) {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    if y >= half {
                        sum += v[(y - half) * size + x];
                        n += 1.0;
                    }
                    if y + half < size {
                        sum += v[(y + half) * size + x];
                        n += 1.0;
                    }
                    if x >= half {
                        sum += v[y * size + x - half];
                        n += 1.0;
                    }
                    if x + half < size {
                        sum += v[y * size + x + half];
                        n += 1.0;
                    }
                    v[y * size + x] = sum / n + r * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            step = half;
            pass += 1;
        }
        Ok(HazeField { size, values: v })
    }

    /// Min-max normalized field; a constant field is returned unchanged.
    pub fn generate(&self, seed: u64) -> Result<HazeField> {
        let mut f = self.generate_raw(seed)?;
        normalize(&mut f.values);
        Ok(f)
    }
}

pub(crate) fn normalize(values: &mut [f64]) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        values.iter_mut().for_each(|v| *v = ((*v - lo) * inv).clamp(0.0, 1.0));
    }
}

pub fn diamond_square(exponent: u32, roughness: f64, seed: u64) -> Result<HazeField> {
    DiamondSquare::new(exponent, roughness).generate(seed)
}

/// Bilinear resampling with corner-aligned sample grids.
pub fn resample_field(field: &HazeField, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage("resample target must be at least 1x1".into()));
    }
    let n = field.size();
    let coord = |i: usize, len: usize| -> (usize, usize, f64) {
        if len == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n - 1) as f64 / (len - 1) as f64;
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, ty) = coord(y, height);
        for x in 0..width {
            let (x0, x1, tx) = coord(x, width);
            let top = field.get(y0, x0) * (1.0 - tx) + field.get(y0, x1) * tx;
            let bottom = field.get(y1, x0) * (1.0 - tx) + field.get(y1, x1) * tx;
            data.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    ImageTensor::from_clamped(height, width, 1, data)
}

/// Generator and compositing settings for one haze level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazeLevelParams {
    pub level: u8,
    pub grid_exponent: u32,
    pub roughness: f64,
    pub density_scale: f64,
    pub airlight: [f64; 3],
}

const DEFAULT_AIRLIGHT: [f64; 3] = [0.95, 0.95, 0.98];

impl HazeLevelParams {
    /// Default table: coarser grids and higher density for thicker haze.
    pub fn default_for(level: u8) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::Config(format!("haze level {level} not in 1..=5")));
        }
        let i = (level - 1) as usize;
        Ok(HazeLevelParams {
            level,
            grid_exponent: [7, 6, 5, 4, 3][i],
            roughness: 1.0,
            density_scale: [0.4, 0.55, 0.7, 0.85, 1.0][i],
            airlight: DEFAULT_AIRLIGHT,
        })
    }

    pub fn default_table() -> Vec<Self> {
        (1..=5).map(|l| Self::default_for(l).unwrap()).collect()
    }

    /// Normalized haze field of this level resampled to `height x width`.
    pub fn field(&self, seed: u64, height: usize, width: usize) -> Result<ImageTensor> {
        let f = DiamondSquare::new(self.grid_exponent, self.roughness).generate(seed)?;
        resample_field(&f, height, width)
    }
}

/// `I = J t + A (1 - t)` with transmission `t = 1 - d * field`, clamped to `[0, 1]`.
pub fn composite_haze(clean: &ImageTensor, field: &ImageTensor, params: &HazeLevelParams) -> Result<ImageTensor> {
    if clean.channels() != 3 || field.channels() != 1 {
        return Err(Error::dim("composite_haze", "expects a 3-channel image and a 1-channel field"));
    }
    if (clean.height(), clean.width()) != (field.height(), field.width()) {
        return Err(Error::dim(
            "composite_haze",
            format!(
                "image is {}x{}, field is {}x{}",
                clean.height(),
                clean.width(),
                field.height(),
                field.width()
            ),
        ));
    }
    let d = params.density_scale;
    let mut data = Vec::with_capacity(clean.data().len());
    for (px, &f) in clean.pixels().zip(field.data()) {
        let t = 1.0 - d * f as f64;
        for (&v, a) in px.iter().zip(params.airlight) {
            data.push((v as f64 * t + a * (1.0 - t)) as f32);
        }
    }
    ImageTensor::from_clamped(clean.height(), clean.width(), 3, data)
}

/// Seed for the haze field of one tile at one level.
pub fn tile_seed(global: u64, source_id: &str, tile_index: usize, level: u8) -> u64 {
    derive_seed(global, &[source_id.into(), tile_index.into(), level.into()])
}

/// Renders one hazy version of `clean` at `level`.
pub fn synthesize(clean: &ImageTensor, level: u8, seed: u64) -> Result<ImageTensor> {
    let params = HazeLevelParams::default_for(level)?;
    let field = params.field(seed, clean.height(), clean.width())?;
    composite_haze(clean, &field, &params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub clean_path: String,
    pub hazy_path: String,
    pub level: u8,
    pub source_id: String,
}

/// JSON index of a built dataset. Image paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub tile: usize,
    pub stride: usize,
    pub levels: Vec<HazeLevelParams>,
    pub pairs: Vec<PairRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads every pair; paths resolve against `root` (the manifest's directory).
    pub fn load_pairs(&self, root: &Path) -> Result<Vec<DatasetPair>> {
        self.pairs
            .iter()
            .map(|r| {
                let clean = load_image(&root.join(&r.clean_path))?;
                let hazy = load_image(&root.join(&r.hazy_path))?;
                DatasetPair::new(hazy, clean, r.level, r.source_id.clone())
            })
            .collect()
    }
}

/// Directory containing a manifest file, for resolving its relative paths.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// PNG files in `dir`, sorted by file name.
pub fn list_png(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub levels: Vec<u8>,
    pub tile: usize,
    pub stride: usize,
    pub seed: u64,
}

/// Tiles every PNG in `src_dir` and writes one hazy rendition per requested level per
/// tile, plus `manifest.json`, under `out_dir`.
pub fn build_dataset(src_dir: &Path, out_dir: &Path, opts: &BuildOptions) -> Result<DatasetManifest> {
    let mut levels = opts.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    if levels.is_empty() {
        return Err(Error::Config("no haze levels requested".into()));
    }
    let table = levels.iter().map(|&l| HazeLevelParams::default_for(l)).collect::<Result<Vec<_>>>()?;
    let sources = list_png(src_dir)?;
    if sources.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", src_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut pairs = Vec::new();
    for src in &sources {
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let img = load_image(src)?;
        let tiles = crop_tiles(&img, opts.tile, opts.stride)?;
        let jobs: Vec<(usize, &HazeLevelParams)> =
            (0..tiles.len()).flat_map(|t| table.iter().map(move |p| (t, p))).collect();
        // Clean tiles first, then every (tile, level) job; each job is independent.
        tiles.par_iter().enumerate().try_for_each(|(t, tile)| {
            save_image(tile, &out_dir.join(clean_rel(&stem, t)))
        })?;
        let records: Vec<PairRecord> = jobs
            .par_iter()
            .map(|&(t, params)| {
                let source_id = format!("{stem}_{t:04}");
                let seed = tile_seed(opts.seed, &source_id, t, params.level);
                let field = params.field(seed, opts.tile, opts.tile)?;
                let hazy = composite_haze(&tiles[t], &field, params)?;
                let hazy_path = hazy_rel(&stem, t, params.level);
                save_image(&hazy, &out_dir.join(&hazy_path))?;
                Ok(PairRecord { clean_path: clean_rel(&stem, t), hazy_path, level: params.level, source_id })
            })
            .collect::<Result<_>>()?;
        pairs.extend(records);
    }
    let manifest = DatasetManifest {
        name: out_dir.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string(),
        seed: opts.seed,
        tile: opts.tile,
        stride: opts.stride,
        levels: table,
        pairs,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn clean_rel(stem: &str, tile: usize) -> String {
    format!("clean/{stem}_{tile:04}.png")
}

fn hazy_rel(stem: &str, tile: usize, level: u8) -> String {
    format!("hazy/level{level}/{stem}_{tile:04}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_corners_without_noise_stay_flat() {
        let f = DiamondSquare::new(4, 0.0).with_corners([0.3; 4]).generate(1).unwrap();
        assert!(f.values().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn exponent_bounds() {
        assert!(diamond_square(0, 1.0, 0).is_err());
        assert!(diamond_square(13, 1.0, 0).is_err());
        let f = diamond_square(3, 1.0, 5).unwrap();
        assert_eq!(f.size(), 9);
        let lo = f.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert!((hi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn composite_examples() {
        let clean = ImageTensor::filled(2, 2, 3, 0.8);
        let mut p = HazeLevelParams::default_for(5).unwrap();
        assert_eq!(composite_haze(&clean, &ImageTensor::filled(2, 2, 1, 0.0), &p).unwrap(), clean);
        let full = composite_haze(&clean, &ImageTensor::filled(2, 2, 1, 1.0), &p).unwrap();
        for px in full.pixels() {
            for (&v, a) in px.iter().zip(p.airlight) {
                assert!((v as f64 - a).abs() < 1e-7);
            }
        }
        p.airlight = [1.0; 3];
        let half = composite_haze(&clean, &ImageTensor::filled(2, 2, 1, 0.5), &p).unwrap();
        assert!(half.data().iter().all(|&v| (v - 0.9).abs() < 1e-6));
        assert!(composite_haze(&clean, &ImageTensor::filled(2, 3, 1, 0.5), &p).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let f = diamond_square(2, 1.0, 3).unwrap();
        let same = resample_field(&f, 5, 5).unwrap();
        for (a, b) in same.data().iter().zip(f.values()) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
        let flat = DiamondSquare::new(2, 0.0).with_corners([0.25; 4]).generate(0).unwrap();
        assert!(resample_field(&flat, 7, 3).unwrap().data().iter().all(|&v| v == 0.25));
    }
}
