//! Synthetic spectral cubes standing in for captured hyperspectral data, and the
//! `HSC1` cube file format.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::color::{anchor_rgb, band_wavelength, BANDS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed::{derive_seed, rng};

/// Maximum absolute difference between adjacent bands of any fixture pixel.
///
/// Each spectrum is a baseline plus Gaussian bumps with widths of at least
/// [`MIN_BUMP_WIDTH_NM`] and total amplitude at most 1, scaled by a shading factor
/// in `[0.5, 1]`; a unit Gaussian of width `s` bands changes by at most
/// `exp(-1/2) / s` per band.
pub const SMOOTHNESS_BOUND: f64 = 0.21;
pub const MIN_BUMP_WIDTH_NM: f64 = 30.0;
const MAX_BUMP_WIDTH_NM: f64 = 80.0;
const BUMPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFixture {
    pub cube: ImageTensor,
    /// Anchor-band (650/550/450 nm) projection of `cube`.
    pub rgb: ImageTensor,
}

#[derive(Debug, Clone)]
struct Region {
    cy: f64,
    cx: f64,
    spectrum: [f64; BANDS],
}

fn random_spectrum(r: &mut impl Rng) -> [f64; BANDS] {
    let total = r.random_range(0.3..1.0);
    let raw: [f64; BUMPS] = std::array::from_fn(|_| r.random_range(0.05..1.0));
    let norm: f64 = raw.iter().sum();
    let bumps: Vec<(f64, f64, f64)> = raw
        .iter()
        .map(|a| {
            let amp = a / norm * total;
            let centre = r.random_range(380.0..720.0);
            let width = r.random_range(MIN_BUMP_WIDTH_NM..MAX_BUMP_WIDTH_NM);
            (amp, centre, width)
        })
        .collect();
    let baseline = r.random_range(0.0..(1.0 - total));
    std::array::from_fn(|k| {
        let nm = band_wavelength(k);
        baseline + bumps.iter().map(|(a, c, w)| a * (-(nm - c).powi(2) / (2.0 * w * w)).exp()).sum::<f64>()
    })
}

fn make_fixture(seed: u64, height: usize, width: usize) -> SpectralFixture {
    let mut r = rng(seed);
    let n_regions = r.random_range(3..=6);
    let regions: Vec<Region> = (0..n_regions)
        .map(|_| Region {
            cy: r.random_range(0.0..height as f64),
            cx: r.random_range(0.0..width as f64),
            spectrum: random_spectrum(&mut r),
        })
        .collect();
    let fy = r.random_range(0.5..3.0) * std::f64::consts::TAU / height as f64;
    let fx = r.random_range(0.5..3.0) * std::f64::consts::TAU / width as f64;
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(height * width * BANDS);
    for y in 0..height {
        for x in 0..width {
            let nearest = regions
                .iter()
                .min_by(|a, b| {
                    let da = (a.cy - y as f64).powi(2) + (a.cx - x as f64).powi(2);
                    let db = (b.cy - y as f64).powi(2) + (b.cx - x as f64).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            let shade = 0.75 + 0.25 * ((y as f64 * fy + phase).sin() * (x as f64 * fx).cos());
            data.extend(nearest.spectrum.iter().map(|&v| (v * shade) as f32));
        }
    }
    let cube = ImageTensor::from_clamped(height, width, BANDS, data).expect("sized above");
    let rgb = anchor_rgb(&cube).expect("31 bands");
    SpectralFixture { cube, rgb }
}

/// `count` deterministic fixtures; fixture `i` depends only on `(seed, i, h, w)`.
pub fn make_spectral_fixtures(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<SpectralFixture>> {
    if count == 0 || height == 0 || width == 0 {
        return Err(Error::Config("fixture count and size must be positive".into()));
    }
    Ok((0..count).map(|i| make_fixture(derive_seed(seed, &["fixture".into(), i.into()]), height, width)).collect())
}

const CUBE_MAGIC: &[u8; 4] = b"HSC1";

/// `HSC1` | u32 H | u32 W | u32 31 | H*W*31 f32, band-major, all little-endian.
pub fn encode_cube(cube: &ImageTensor) -> Result<Vec<u8>> {
    if cube.channels() != BANDS {
        return Err(Error::dim("encode_cube", format!("expected {BANDS} bands, got {}", cube.channels())));
    }
    let (h, w, c) = cube.dims();
    let mut out = Vec::with_capacity(16 + h * w * c * 4);
    out.extend_from_slice(CUBE_MAGIC);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for band in 0..c {
        for px in cube.pixels() {
            out.extend_from_slice(&px[band].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let bad = |m: &str| Error::Format { path: path.to_path_buf(), message: m.to_string() };
    if bytes.len() < 16 || &bytes[..4] != CUBE_MAGIC {
        return Err(bad("missing HSC1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != BANDS {
        return Err(bad(&format!("expected {BANDS} bands, header says {c}")));
    }
    let n = h * w * c;
    if bytes.len() != 16 + n * 4 {
        return Err(bad(&format!("expected {} payload bytes, found {}", n * 4, bytes.len() - 16)));
    }
    let mut data = vec![0.0f32; n];
    for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let band = i / (h * w);
        let px = i % (h * w);
        data[px * c + band] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    ImageTensor::new(h, w, c, data).map_err(|e| bad(&e.to_string()))
}

pub fn save_cube(cube: &ImageTensor, path: &Path) -> Result<()> {
    fs::write(path, encode_cube(cube)?).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes, path)
}

/// Every `*.hsc` file in `dir`, sorted by name.
pub fn load_cube_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hsc"))
        .collect();
    files.sort();
    files.iter().map(|p| load_cube(p)).collect()
}
