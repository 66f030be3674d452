//! Tape-based reverse-mode automatic differentiation over 4-D tensors.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use crate::conv::{self, ConvGeom, ConvShape};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    ConvT { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    SelectChannels { x: Var, idx: Vec<usize> },
    ChannelMix { x: Var, matrix: Vec<T>, in_c: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    MeanSquaredError { a: Var, b: Var },
    MeanAbsError { a: Var, b: Var },
    MeanLogSigmoid { x: Var, sign: T },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims4()
    }

    /// Input or parameter leaf. Gradients are only accumulated for `trainable` leaves
    /// and everything downstream of them.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new non-differentiable leaf (a stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let [n, c, h, wd] = self.dims(x);
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv2d: weight expects {} input channels, got {c}", ws[1]);
        assert_eq!(ws[2], geom.kernel);
        let oh = geom.conv_out(h).expect("conv2d: kernel larger than padded input");
        let ow = geom.conv_out(wd).expect("conv2d: kernel larger than padded input");
        let shape = ConvShape { batch: n, in_c: c, in_h: h, in_w: wd, out_c: ws[0], out_h: oh, out_w: ow, geom };
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            shape,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(vec![n, ws[0], oh, ow], out).unwrap(), Op::Conv { x, w, b, shape }, rg)
    }

    /// Transposed convolution; `w` is `[in_c, out_c, k, k]`.
    pub fn conv_t2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let [n, c, h, wd] = self.dims(x);
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], c, "conv_t2d: weight expects {} input channels, got {c}", ws[0]);
        let oh = geom.conv_t_out(h).expect("conv_t2d: invalid geometry");
        let ow = geom.conv_t_out(wd).expect("conv_t2d: invalid geometry");
        let shape = ConvShape { batch: n, in_c: c, in_h: h, in_w: wd, out_c: ws[1], out_h: oh, out_w: ow, geom };
        let out = conv::conv_t2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            shape,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(vec![n, ws[1], oh, ow], out).unwrap(), Op::ConvT { x, w, b, shape }, rg)
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.dims(x);
        let plane = h * w;
        let inv_plane = T::one() / T::from_usize(plane).unwrap();
        let eps = T::from_f64_lossy(NORM_EPS);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (i, (xs, ys)) in src.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
            debug_assert!(i < n * c);
            let mut mean = T::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_plane;
            let mut var = T::zero();
            for &v in xs {
                var += (v - mean) * (v - mean);
            }
            var *= inv_plane;
            let is = T::one() / (var + eps).sqrt();
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(vec![n, c, h, w], out).unwrap(), Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64_lossy(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.dims(parts[0]);
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.dims(p);
            assert_eq!((pn, ph, pw), (n, h, w), "concat: batch/spatial mismatch");
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &p in parts {
                let pc = self.dims(p)[1];
                data.extend_from_slice(&self.value(p).data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(vec![n, total_c, h, w], data).unwrap(), Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Gathers channels `idx` (in that order).
    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Var {
        let [n, c, h, w] = self.dims(x);
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * idx.len() * plane);
        for s in 0..n {
            for &i in idx {
                assert!(i < c, "select_channels: channel {i} out of range {c}");
                data.extend_from_slice(&src[(s * c + i) * plane..(s * c + i + 1) * plane]);
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(vec![n, idx.len(), h, w], data).unwrap(),
            Op::SelectChannels { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Fixed per-pixel channel mixing: `out[o] = sum_i matrix[o][i] * x[i]`,
    /// `matrix` row-major `[out_c, in_c]`.
    pub fn channel_mix(&mut self, x: Var, matrix: &[T], out_c: usize) -> Var {
        let [n, c, h, w] = self.dims(x);
        assert_eq!(matrix.len(), out_c * c, "channel_mix: matrix is not [{out_c}, {c}]");
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * out_c * plane];
        for s in 0..n {
            gemm(
                Mat::new(matrix, out_c, c),
                Mat::new(&src[s * c * plane..(s + 1) * c * plane], c, plane),
                &mut data[s * out_c * plane..(s + 1) * out_c * plane],
                T::zero(),
            );
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(vec![n, out_c, h, w], data).unwrap(),
            Op::ChannelMix { x, matrix: matrix.to_vec(), in_c: c },
            rg,
        )
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.dims(x);
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(vec![n, c, 1, 1], data).unwrap(), Op::GlobalAvgPool { x }, rg)
    }

    /// Dense layer on `[n, f, 1, 1]`; `w` is `[o, f]`, `b` is `[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let [n, f, h, wd] = self.dims(x);
        assert_eq!((h, wd), (1, 1), "linear expects [n, f, 1, 1]");
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[1], f);
        let o = ws[0];
        let mut data = vec![T::zero(); n * o];
        for s in 0..n {
            data[s * o..(s + 1) * o].copy_from_slice(self.value(b).data());
        }
        gemm(Mat::new(self.value(x).data(), n, f), Mat::new(self.value(w).data(), o, f).t(), &mut data, T::one());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::from_vec(vec![n, o, 1, 1], data).unwrap(), Op::Linear { x, w, b }, rg)
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let mut acc = T::zero();
        for (&p, &q) in va.data().iter().zip(vb.data()) {
            acc += (p - q) * (p - q);
        }
        let v = acc / T::from_usize(va.len()).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::MeanSquaredError { a, b }, rg)
    }

    /// `mean(|a - b|)` over all elements.
    pub fn mae(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mae: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let mut acc = T::zero();
        for (&p, &q) in va.data().iter().zip(vb.data()) {
            acc += (p - q).abs();
        }
        let v = acc / T::from_usize(va.len()).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::MeanAbsError { a, b }, rg)
    }

    /// `mean(log sigmoid(x))`, or `mean(log(1 - sigmoid(x)))` when `positive` is false.
    pub fn mean_log_sigmoid(&mut self, x: Var, positive: bool) -> Var {
        let sign = if positive { T::one() } else { -T::one() };
        let vx = self.value(x);
        let mut acc = T::zero();
        for &v in vx.data() {
            acc += log_sigmoid(sign * v);
        }
        let v = acc / T::from_usize(vx.len()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MeanLogSigmoid { x, sign }, rg)
    }

    /// `sum_i c_i * v_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut data = vec![T::zero(); self.value(terms[0].0).len()];
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, c)| (v, T::from_f64_lossy(c))).collect();
        for &(v, c) in &terms {
            let val = self.value(v);
            assert_eq!(val.shape(), &shape[..], "weighted_sum: shape mismatch");
            data.iter_mut().zip(val.data()).for_each(|(d, &x)| *d += c * x);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::from_vec(shape, data).unwrap(), Op::WeightedSum { terms }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.weighted_sum(&[(x, c)])
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar node. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`
    /// (zeros if `v` did not influence the loss).
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_vec(shape, g.clone()).unwrap(),
            None => Tensor::zeros(shape),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Split borrow: the op is read while gradients of earlier nodes are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv { x, w, b, shape } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    *shape,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(*x, dx);
                }
                self.accumulate(*w, dw);
                if let Some(b) = b {
                    self.accumulate(*b, db);
                }
            }
            Op::ConvT { x, w, b, shape } => {
                let (dx, dw, db) = conv::conv_t2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    *shape,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(*x, dx);
                }
                self.accumulate(*w, dw);
                if let Some(b) = b {
                    self.accumulate(*b, db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = self.nodes[i].value.data();
                let [_, _, h, w] = self.nodes[i].value.dims4();
                let plane = h * w;
                let inv_plane = T::one() / T::from_usize(plane).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (k, ((ys, gs), ds)) in y.chunks(plane).zip(g.chunks(plane)).zip(dx.chunks_mut(plane)).enumerate() {
                    let mut mg = T::zero();
                    let mut mgy = T::zero();
                    for (&yy, &gg) in ys.iter().zip(gs) {
                        mg += gg;
                        mgy += gg * yy;
                    }
                    mg *= inv_plane;
                    mgy *= inv_plane;
                    for ((d, &yy), &gg) in ds.iter_mut().zip(ys).zip(gs) {
                        *d = inv_std[k] * (gg - mg - yy * mgy);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { gg * *slope })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gg)| gg * s * (T::one() - s))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Concat { parts } => {
                let [n, total_c, h, w] = self.nodes[i].value.dims4();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p)[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * plane);
                        for s in 0..n {
                            let start = (s * total_c + offset) * plane;
                            dp.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += pc;
                }
            }
            Op::SelectChannels { x, idx } => {
                let [n, c, h, w] = self.dims(*x);
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    for (j, &ci) in idx.iter().enumerate() {
                        let src = &g[(s * idx.len() + j) * plane..(s * idx.len() + j + 1) * plane];
                        let dst = &mut dx[(s * c + ci) * plane..(s * c + ci + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::ChannelMix { x, matrix, in_c } => {
                let [n, out_c, h, w] = self.nodes[i].value.dims4();
                let plane = h * w;
                let mut dx = vec![T::zero(); n * in_c * plane];
                for s in 0..n {
                    gemm(
                        Mat::new(matrix, out_c, *in_c).t(),
                        Mat::new(&g[s * out_c * plane..(s + 1) * out_c * plane], out_c, plane),
                        &mut dx[s * in_c * plane..(s + 1) * in_c * plane],
                        T::zero(),
                    );
                }
                self.accumulate(*x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.dims(*x);
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Vec::with_capacity(g.len() * h * w);
                for &gg in g {
                    dx.extend(std::iter::repeat_n(gg * inv, h * w));
                }
                self.accumulate(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let [n, f, _, _] = self.dims(*x);
                let o = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(Mat::new(g, n, o), Mat::new(self.value(*w).data(), o, f), &mut dx, T::zero());
                    self.accumulate(*x, dx);
                }
                let mut dw = vec![T::zero(); o * f];
                gemm(Mat::new(g, n, o).t(), Mat::new(self.value(*x).data(), n, f), &mut dw, T::zero());
                self.accumulate(*w, dw);
                let mut db = vec![T::zero(); o];
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                self.accumulate(*b, db);
            }
            Op::MeanSquaredError { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = g[0] * T::from_f64_lossy(2.0) / T::from_usize(va.len()).unwrap();
                let da: Vec<T> = va.iter().zip(vb).map(|(&p, &q)| c * (p - q)).collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::MeanAbsError { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = g[0] / T::from_usize(va.len()).unwrap();
                let da: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        if d > T::zero() {
                            c
                        } else if d < T::zero() {
                            -c
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::MeanLogSigmoid { x, sign } => {
                let vx = self.value(*x).data();
                let c = g[0] / T::from_usize(vx.len()).unwrap();
                // d/dz log sigmoid(s z) = s * sigmoid(-s z)
                let dx = vx.iter().map(|&v| c * *sign * sigmoid(-*sign * v)).collect();
                self.accumulate(*x, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    let dv = g.iter().map(|&gg| gg * c).collect();
                    self.accumulate(v, dv);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(z))` without overflow: `min(z, 0) - ln(1 + e^{-|z|})`.
pub fn log_sigmoid<T: Scalar>(z: T) -> T {
    z.min(T::zero()) - (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    /// Central differences on every element of every trainable leaf.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, leaves: Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss);
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut perturbed = leaves.clone();
                    perturbed[li].data_mut()[e] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|l| g.leaf(l, true)).collect();
                    let l = build(&mut g, &vars);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[li].data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "leaf {li} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-1000.0f64).is_finite());
        assert_eq!(log_sigmoid(1000.0f64), 0.0);
    }

    #[test]
    fn conv_norm_act_chain_gradients() {
        let x = t(vec![2, 3, 6, 6], |i| ((i as f64) * 0.31).sin());
        let w = t(vec![4, 3, 3, 3], |i| ((i as f64) * 0.17).cos() * 0.3);
        let b = t(vec![4], |i| i as f64 * 0.1);
        let target = t(vec![2, 4, 3, 3], |i| ((i as f64) * 0.05).cos().abs());
        check(
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(3, 2, 1));
                let y = g.instance_norm(y);
                let y = g.leaky_relu(y, 0.2);
                let y = g.sigmoid(y);
                let tv = g.constant(target.clone());
                g.mse(y, tv)
            },
            vec![x, w, b],
        );
    }

    #[test]
    fn conv_t_concat_select_mix_gradients() {
        let x = t(vec![1, 2, 3, 3], |i| ((i as f64) * 0.7).sin());
        let w = t(vec![2, 3, 4, 4], |i| ((i as f64) * 0.13).sin() * 0.5);
        let b = t(vec![3], |i| i as f64 * -0.2);
        let skip = t(vec![1, 2, 6, 6], |i| ((i as f64) * 0.11).cos());
        check(
            |g, v| {
                let y = g.conv_t2d(v[0], v[1], Some(v[2]), ConvGeom::new(4, 2, 1));
                let y = g.concat(&[y, v[3]]);
                let y = g.select_channels(y, &[4, 0, 2, 1]);
                let y = g.channel_mix(y, &[0.5, 0.25, 0.25, 0.0, 0.1, 0.2, 0.3, 0.4], 2);
                let y = g.relu(y);
                let z = g.constant(Tensor::full(vec![1, 2, 6, 6], 0.3));
                let a = g.mse(y, z);
                let m = g.mean_log_sigmoid(y, false);
                g.weighted_sum(&[(a, 1.0), (m, -0.5)])
            },
            vec![x, w, b, skip],
        );
    }

    #[test]
    fn pool_linear_logsigmoid_gradients() {
        let x = t(vec![3, 4, 2, 2], |i| ((i as f64) * 0.9).sin());
        let w = t(vec![2, 4], |i| i as f64 * 0.1 - 0.3);
        let b = t(vec![2], |i| i as f64 * 0.05);
        check(
            |g, v| {
                let p = g.global_avg_pool(v[0]);
                let l = g.linear(p, v[1], v[2]);
                let a = g.mean_log_sigmoid(l, true);
                let c = g.mean_log_sigmoid(l, false);
                let s = g.add(a, c);
                g.scale(s, -1.0)
            },
            vec![x, w, b],
        );
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(vec![1, 1, 2, 2], 0.5), true);
        let d = g.detach(a);
        let z = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let l = g.mse(d, z);
        g.backward(l);
        assert!(g.grad(a).data().iter().all(|&v| v == 0.0));
    }
}
