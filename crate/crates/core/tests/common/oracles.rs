//! Reference implementations written independently of the library code paths.

// Plain index loops keep the oracles easy to check by eye.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skygan::image::ImageTensor;

/// Hexcone HSV (hue in `[0, 1)`) back to RGB.
pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const M: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

/// Unnormalized CIE L*a*b* (reference white = matrix row sums) back to sRGB.
pub fn lab_to_rgb([l, a, b]: [f64; 3]) -> [f64; 3] {
    let delta: f64 = 6.0 / 29.0;
    let finv = |t: f64| if t > delta { t.powi(3) } else { 3.0 * delta * delta * (t - 4.0 / 29.0) };
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let white = M.map(|r| r[0] + r[1] + r[2]);
    let xyz = [finv(fx) * white[0], finv(fy) * white[1], finv(fz) * white[2]];
    let inv = inverse3(M);
    let lin = inv.map(|r| r[0] * xyz[0] + r[1] * xyz[1] + r[2] * xyz[2]);
    lin.map(|c| if c <= 0.0031308 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 })
}

/// Band weights `(wR, wG, wB)` at band `k`, from the anchor description.
pub fn band_weight(k: usize) -> [f64; 3] {
    let nm = 400.0 + 10.0 * k as f64;
    let ramp = |lo: f64| ((nm - lo) / 100.0).clamp(0.0, 1.0);
    if nm <= 550.0 {
        let t = ramp(450.0);
        [0.0, t, 1.0 - t]
    } else {
        let t = ramp(550.0);
        [t, 1.0 - t, 0.0]
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse < 1e-12 {
        120.0
    } else {
        -10.0 * mse.log10()
    }
}

/// Per-window SSIM with an explicit 11x11 Gaussian (sigma 1.5), valid positions only,
/// averaged over positions and then channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w, ch) = a.dims();
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut per_channel = 0.0;
    for c in 0..ch {
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / total;
                        let p = a.get(y + i, x + j, c) as f64;
                        let q = b.get(y + i, x + j, c) as f64;
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        per_channel += sum / count;
    }
    per_channel / ch as f64
}

/// Step-by-step diamond-square on a 5x5 grid (n = 2), written out cell by cell.
pub fn diamond_square_n2(roughness: f64, seed: u64) -> [[f64; 5]; 5] {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || r.random::<f64>();
    let mut g = [[0.0f64; 5]; 5];
    g[0][0] = u();
    g[0][4] = u();
    g[4][0] = u();
    g[4][4] = u();
    let noise = |amp: f64, u: f64| amp * (2.0 * u - 1.0);
    // Pass 0: amplitude r.
    let r0 = roughness;
    g[2][2] = (g[0][0] + g[0][4] + g[4][0] + g[4][4]) / 4.0 + noise(r0, u());
    g[0][2] = (g[2][2] + g[0][0] + g[0][4]) / 3.0 + noise(r0, u());
    g[2][0] = (g[0][0] + g[4][0] + g[2][2]) / 3.0 + noise(r0, u());
    g[2][4] = (g[0][4] + g[4][4] + g[2][2]) / 3.0 + noise(r0, u());
    g[4][2] = (g[2][2] + g[4][0] + g[4][4]) / 3.0 + noise(r0, u());
    // Pass 1: amplitude r/2. Diamond centres.
    let r1 = roughness / 2.0;
    g[1][1] = (g[0][0] + g[0][2] + g[2][0] + g[2][2]) / 4.0 + noise(r1, u());
    g[1][3] = (g[0][2] + g[0][4] + g[2][2] + g[2][4]) / 4.0 + noise(r1, u());
    g[3][1] = (g[2][0] + g[2][2] + g[4][0] + g[4][2]) / 4.0 + noise(r1, u());
    g[3][3] = (g[2][2] + g[2][4] + g[4][2] + g[4][4]) / 4.0 + noise(r1, u());
    // Square cells, row-major; neighbours summed up, down, left, right.
    g[0][1] = (g[1][1] + g[0][0] + g[0][2]) / 3.0 + noise(r1, u());
    g[0][3] = (g[1][3] + g[0][2] + g[0][4]) / 3.0 + noise(r1, u());
    g[1][0] = (g[0][0] + g[2][0] + g[1][1]) / 3.0 + noise(r1, u());
    g[1][2] = (g[0][2] + g[2][2] + g[1][1] + g[1][3]) / 4.0 + noise(r1, u());
    g[1][4] = (g[0][4] + g[2][4] + g[1][3]) / 3.0 + noise(r1, u());
    g[2][1] = (g[1][1] + g[3][1] + g[2][0] + g[2][2]) / 4.0 + noise(r1, u());
    g[2][3] = (g[1][3] + g[3][3] + g[2][2] + g[2][4]) / 4.0 + noise(r1, u());
    g[3][0] = (g[2][0] + g[4][0] + g[3][1]) / 3.0 + noise(r1, u());
    g[3][2] = (g[2][2] + g[4][2] + g[3][1] + g[3][3]) / 4.0 + noise(r1, u());
    g[3][4] = (g[2][4] + g[4][4] + g[3][3]) / 3.0 + noise(r1, u());
    g[4][1] = (g[3][1] + g[4][0] + g[4][2]) / 3.0 + noise(r1, u());
    g[4][3] = (g[3][3] + g[4][2] + g[4][4]) / 3.0 + noise(r1, u());
    let lo = g.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inv = 1.0 / (hi - lo);
    g.map(|row| row.map(|v| ((v - lo) * inv).clamp(0.0, 1.0)))
}
