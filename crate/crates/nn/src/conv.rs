//! Convolution kernels (im2col + gemm), zero padding, square kernels.

use rayon::prelude::*;

use crate::scalar::{gemm, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    /// Output extent of a forward convolution, `None` if the kernel does not fit.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution.
    pub fn conv_t_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// `col[(c*k + ki)*k + kj, oy*ow + ox] = x[c, oy*s + ki - p, ox*s + kj - p]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of one convolution call. `in_*` is the input image, `out_*` the output image.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeom,
}

/// Forward convolution. `weight` is `[out_c, in_c, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, s: ConvShape) -> Vec<T> {
    let k = s.geom.kernel;
    let ckk = s.in_c * k * k;
    let in_len = s.in_c * s.in_h * s.in_w;
    let plane = s.out_h * s.out_w;
    let mut out = vec![T::zero(); s.batch * s.out_c * plane];
    out.par_chunks_mut(s.out_c * plane).enumerate().for_each(|(n, o)| {
        let mut col = vec![T::zero(); ckk * plane];
        im2col(&x[n * in_len..(n + 1) * in_len], s.in_c, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, &mut col);
        gemm(Mat::new(weight, s.out_c, ckk), Mat::new(&col, ckk, plane), o, T::zero());
        if let Some(b) = bias {
            for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    out
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    s: ConvShape,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let k = s.geom.kernel;
    let ckk = s.in_c * k * k;
    let in_len = s.in_c * s.in_h * s.in_w;
    let plane = s.out_h * s.out_w;
    let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = (0..s.batch)
        .into_par_iter()
        .map(|n| {
            let go = &grad_out[n * s.out_c * plane..(n + 1) * s.out_c * plane];
            let mut col = vec![T::zero(); ckk * plane];
            im2col(&x[n * in_len..(n + 1) * in_len], s.in_c, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, &mut col);
            let mut dw = vec![T::zero(); s.out_c * ckk];
            gemm(Mat::new(go, s.out_c, plane), Mat::new(&col, ckk, plane).t(), &mut dw, T::zero());
            let dx = need_dx.then(|| {
                gemm(Mat::new(weight, s.out_c, ckk).t(), Mat::new(go, s.out_c, plane), &mut col, T::zero());
                let mut dx = vec![T::zero(); in_len];
                col2im(&col, s.in_c, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();
    reduce_conv_grads(per_sample, grad_out, s.out_c, plane, s.out_c * ckk, need_dx)
}

/// Transposed convolution. `weight` is `[in_c, out_c, k, k]`; it is the adjoint of a
/// forward convolution from the output image to the input image.
pub fn conv_t2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, s: ConvShape) -> Vec<T> {
    let k = s.geom.kernel;
    let okk = s.out_c * k * k;
    let in_plane = s.in_h * s.in_w;
    let out_len = s.out_c * s.out_h * s.out_w;
    let mut out = vec![T::zero(); s.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(n, o)| {
        let xs = &x[n * s.in_c * in_plane..(n + 1) * s.in_c * in_plane];
        let mut col = vec![T::zero(); okk * in_plane];
        gemm(Mat::new(weight, s.in_c, okk).t(), Mat::new(xs, s.in_c, in_plane), &mut col, T::zero());
        col2im(&col, s.out_c, s.out_h, s.out_w, s.geom, s.in_h, s.in_w, o);
        if let Some(b) = bias {
            let plane = s.out_h * s.out_w;
            for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    out
}

pub fn conv_t2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    s: ConvShape,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let k = s.geom.kernel;
    let okk = s.out_c * k * k;
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    let out_len = s.out_c * out_plane;
    let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = (0..s.batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * s.in_c * in_plane..(n + 1) * s.in_c * in_plane];
            let go = &grad_out[n * out_len..(n + 1) * out_len];
            let mut col = vec![T::zero(); okk * in_plane];
            im2col(go, s.out_c, s.out_h, s.out_w, s.geom, s.in_h, s.in_w, &mut col);
            let mut dw = vec![T::zero(); s.in_c * okk];
            gemm(Mat::new(xs, s.in_c, in_plane), Mat::new(&col, okk, in_plane).t(), &mut dw, T::zero());
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); s.in_c * in_plane];
                gemm(Mat::new(weight, s.in_c, okk), Mat::new(&col, okk, in_plane), &mut dx, T::zero());
                dx
            });
            (dx, dw)
        })
        .collect();
    reduce_conv_grads(per_sample, grad_out, s.out_c, out_plane, s.in_c * okk, need_dx)
}

/// Sums per-sample weight gradients in batch order so results do not depend on
/// thread scheduling.
fn reduce_conv_grads<T: Scalar>(
    per_sample: Vec<(Option<Vec<T>>, Vec<T>)>,
    grad_out: &[T],
    out_c: usize,
    plane: usize,
    w_len: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); w_len];
    let mut dx = need_dx.then(Vec::new);
    for (sample_dx, sample_dw) in per_sample {
        dw.iter_mut().zip(&sample_dw).for_each(|(a, &b)| *a += b);
        if let (Some(dx), Some(sdx)) = (dx.as_mut(), sample_dx) {
            dx.extend_from_slice(&sdx);
        }
    }
    let mut db = vec![T::zero(); out_c];
    for chunk in grad_out.chunks(out_c * plane) {
        for (oc, ch) in chunk.chunks(plane).enumerate() {
            let mut acc = T::zero();
            for &v in ch {
                acc += v;
            }
            db[oc] += acc;
        }
    }
    (dx, dw, db)
}
