//! Color-space conversions, the 12-channel multi-cue image and the 3 -> 31 band
//! spanning used as the spectral reconstruction scaffold.
//!
//! All scalar conversions take and return `[0, 1]`-normalized triples.

use skygan_nn::{Graph, Scalar, Var};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const BANDS: usize = 31;
pub const MULTICUE_CHANNELS: usize = 12;
/// Band indices whose wavelengths (650, 550, 450 nm) anchor R, G and B.
pub const ANCHOR_BANDS: [usize; 3] = [25, 15, 5];

pub fn band_wavelength(band: usize) -> f64 {
    400.0 + 10.0 * band as f64
}

/// Hexcone HSV with hue scaled to `[0, 1)`; hue is 0 for achromatic pixels.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return [0.0, 0.0, max];
    }
    let sector = if max == r {
        let h = (g - b) / delta;
        if h < 0.0 {
            h + 6.0
        } else {
            h
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    [sector / 6.0, s, max]
}

/// Full-range BT.601 with chroma offset by 0.5.
pub fn rgb_to_ycbcr([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, (b - y) / 1.772 + 0.5, (r - y) / 1.402 + 0.5]
}

/// Linear sRGB -> XYZ (D65).
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white, taken as the image of linear (1, 1, 1) so that sRGB white
/// maps to `L* = 100, a* = b* = 0` exactly.
pub fn white_point() -> [f64; 3] {
    SRGB_TO_XYZ.map(|row| row.iter().sum())
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const LAB_EPS: f64 = 216.0 / 24389.0; // (6/29)^3

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPS {
        t.cbrt()
    } else {
        t * (24389.0 / 27.0) / 116.0 + 16.0 / 116.0
    }
}

/// Unnormalized CIE 1976 `(L*, a*, b*)`.
pub fn rgb_to_lab_raw(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = SRGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let wp = white_point();
    let f = [lab_f(xyz[0] / wp[0]), lab_f(xyz[1] / wp[1]), lab_f(xyz[2] / wp[2])];
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// `(L/100, (a + 128)/255, (b + 128)/255)`, clamped to `[0, 1]`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [l, a, b] = rgb_to_lab_raw(rgb);
    [(l / 100.0).clamp(0.0, 1.0), ((a + 128.0) / 255.0).clamp(0.0, 1.0), ((b + 128.0) / 255.0).clamp(0.0, 1.0)]
}

/// `[R, G, B, H, S, V, Y, Cb, Cr, L*, a*, b*]` of one pixel.
pub fn multicue_pixel(rgb: [f64; 3]) -> [f64; MULTICUE_CHANNELS] {
    let hsv = rgb_to_hsv(rgb);
    let ycc = rgb_to_ycbcr(rgb);
    let lab = rgb_to_lab(rgb);
    let mut out = [0.0; MULTICUE_CHANNELS];
    out[..3].copy_from_slice(&rgb);
    out[3..6].copy_from_slice(&hsv);
    out[6..9].copy_from_slice(&ycc);
    out[9..].copy_from_slice(&lab);
    out
}

fn require_rgb(img: &ImageTensor, what: &'static str) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::dim(what, format!("expected 3 channels, got {}", img.channels())));
    }
    Ok(())
}

/// 12-channel multi-cue image. Channels 0-2 are copied from the input unchanged.
pub fn assemble_multicue(rgb: &ImageTensor) -> Result<ImageTensor> {
    require_rgb(rgb, "assemble_multicue")?;
    let mut data = Vec::with_capacity(rgb.height() * rgb.width() * MULTICUE_CHANNELS);
    for px in rgb.pixels() {
        data.extend_from_slice(px);
        let cues = multicue_pixel([px[0] as f64, px[1] as f64, px[2] as f64]);
        data.extend(cues[3..].iter().map(|&v| v as f32));
    }
    ImageTensor::from_clamped(rgb.height(), rgb.width(), MULTICUE_CHANNELS, data)
}

/// Row-stochastic `31 x 3` matrix mapping `(R, G, B)` to bands.
///
/// Blue is anchored at 450 nm, green at 550 nm and red at 650 nm; bands below 450 nm
/// are pure blue, above 650 nm pure red, and linear cross-fades in between.
#[derive(Debug, Clone, PartialEq)]
pub struct BandWeights {
    rows: [[f64; 3]; BANDS],
}

impl Default for BandWeights {
    fn default() -> Self {
        let mut rows = [[0.0; 3]; BANDS];
        for (k, row) in rows.iter_mut().enumerate() {
            let nm = band_wavelength(k);
            *row = if nm <= 450.0 {
                [0.0, 0.0, 1.0]
            } else if nm < 550.0 {
                let t = (nm - 450.0) / 100.0;
                [0.0, t, 1.0 - t]
            } else if nm < 650.0 {
                let t = (nm - 550.0) / 100.0;
                [t, 1.0 - t, 0.0]
            } else {
                [1.0, 0.0, 0.0]
            };
        }
        BandWeights { rows }
    }
}

impl BandWeights {
    pub fn row(&self, band: usize) -> [f64; 3] {
        self.rows[band]
    }

    pub fn rows(&self) -> &[[f64; 3]; BANDS] {
        &self.rows
    }

    pub fn span_pixel(&self, [r, g, b]: [f64; 3]) -> [f64; BANDS] {
        self.rows.map(|w| w[0] * r + w[1] * g + w[2] * b)
    }

    /// Flattened `[31, 3]` matrix for [`Graph::channel_mix`].
    pub fn matrix<T: Scalar>(&self) -> Vec<T> {
        self.rows.iter().flatten().map(|&v| T::from_f64_lossy(v)).collect()
    }
}

/// 31-band spanned image; band `k` corresponds to `400 + 10 k` nm.
pub fn span_channels(rgb: &ImageTensor) -> Result<ImageTensor> {
    require_rgb(rgb, "span_channels")?;
    let w = BandWeights::default();
    let mut data = Vec::with_capacity(rgb.height() * rgb.width() * BANDS);
    for px in rgb.pixels() {
        let bands = w.span_pixel([px[0] as f64, px[1] as f64, px[2] as f64]);
        data.extend(bands.iter().map(|&v| v as f32));
    }
    ImageTensor::from_clamped(rgb.height(), rgb.width(), BANDS, data)
}

/// The R, G, B anchor bands of a 31-band image; inverts [`span_channels`] exactly.
pub fn anchor_rgb(cube: &ImageTensor) -> Result<ImageTensor> {
    if cube.channels() != BANDS {
        return Err(Error::dim("anchor_rgb", format!("expected {BANDS} bands, got {}", cube.channels())));
    }
    cube.select_channels(&ANCHOR_BANDS)
}

/// [`span_channels`] as a differentiable op on `[n, 3, h, w]`.
pub fn span_var<T: Scalar>(g: &mut Graph<T>, rgb: Var) -> Var {
    g.channel_mix(rgb, &BandWeights::default().matrix::<T>(), BANDS)
}

/// [`anchor_rgb`] as a differentiable op on `[n, 31, h, w]`.
pub fn anchor_rgb_var<T: Scalar>(g: &mut Graph<T>, cube: Var) -> Var {
    g.select_channels(cube, &ANCHOR_BANDS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hsv_examples() {
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv([0.5, 0.5, 0.5]), [0.0, 0.0, 0.5]);
        assert!(close(rgb_to_hsv([0.0, 1.0, 0.0]), [1.0 / 3.0, 1.0, 1.0], 1e-15));
        assert!(close(rgb_to_hsv([0.0, 0.0, 1.0]), [2.0 / 3.0, 1.0, 1.0], 1e-15));
        assert!(close(rgb_to_hsv([1.0, 0.0, 0.5]), [11.0 / 12.0, 1.0, 1.0], 1e-15));
        assert_eq!(rgb_to_hsv([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn ycbcr_examples() {
        assert!(close(rgb_to_ycbcr([1.0, 1.0, 1.0]), [1.0, 0.5, 0.5], 1e-15));
        assert_eq!(rgb_to_ycbcr([0.0, 0.0, 0.0]), [0.0, 0.5, 0.5]);
        let red = rgb_to_ycbcr([1.0, 0.0, 0.0]);
        assert!(close(red, [0.299, 0.5 - 0.299 / 1.772, 1.0], 1e-15));
        assert!((red[1] - 0.33126).abs() < 1e-5);
    }

    #[test]
    fn lab_examples() {
        assert!(close(rgb_to_lab_raw([1.0, 1.0, 1.0]), [100.0, 0.0, 0.0], 1e-12));
        assert!(close(rgb_to_lab_raw([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0], 1e-12));
        let gray = rgb_to_lab_raw([0.5, 0.5, 0.5]);
        assert!((gray[0] - 53.389).abs() < 1e-3, "{gray:?}");
        assert!(gray[1].abs() < 1e-12 && gray[2].abs() < 1e-12);
        assert!(close(rgb_to_lab([1.0, 1.0, 1.0]), [1.0, 128.0 / 255.0, 128.0 / 255.0], 1e-12));
    }

    #[test]
    fn white_multicue() {
        let img = ImageTensor::filled(2, 2, 3, 1.0);
        let mc = assemble_multicue(&img).unwrap();
        let expect = [1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 1.0, 0.50196, 0.50196];
        for px in mc.pixels() {
            for (a, b) in px.iter().zip(expect) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
        assert!(assemble_multicue(&ImageTensor::filled(1, 1, 4, 0.0)).is_err());
    }

    #[test]
    fn band_weights_and_blue_example() {
        let w = BandWeights::default();
        for row in w.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let blue = w.span_pixel([0.0, 0.0, 1.0]);
        assert_eq!(blue[5], 1.0); // 450 nm
        assert_eq!(blue[15], 0.0); // 550 nm
        assert!((blue[10] - 0.5).abs() < 1e-15); // 500 nm
        let rgb = [0.2, 0.7, 0.9];
        let s = w.span_pixel(rgb);
        assert_eq!([s[25], s[15], s[5]], rgb);
    }

    #[test]
    fn graph_span_matches_image_span() {
        let img = ImageTensor::from_fn(3, 4, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f32 / 10.0).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(img.to_tensor());
        let s = span_var(&mut g, x);
        let via_graph = ImageTensor::from_tensor(g.value(s), 0).unwrap();
        let direct = span_channels(&img).unwrap();
        for (a, b) in via_graph.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(anchor_rgb(&direct).unwrap(), img);
    }
}
