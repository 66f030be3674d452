//! Network architectures: U-Net generator, PatchGAN discriminator, global domain
//! classifier and the residual catalyst network.

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeom;
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;
const DOWN: ConvGeom = ConvGeom { kernel: 4, stride: 2, pad: 1 };
const SAME3: ConvGeom = ConvGeom { kernel: 3, stride: 1, pad: 1 };

/// A differentiable network with its own parameter set.
pub trait Module<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// `bound` must come from `self.params().bind(..)` on the same graph.
    fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var;

    /// Gradient-free evaluation on a fresh tape.
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let bound = self.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv);
        g.value(y).clone()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
}

impl Layer {
    fn conv<T: Scalar>(p: &mut ParamSet<T>, init: &mut Initializer, name: &str, out_c: usize, in_c: usize, k: usize) -> Self {
        let w = p.push(format!("{name}.weight"), init.weight(vec![out_c, in_c, k, k]));
        let b = p.push(format!("{name}.bias"), init.bias(out_c));
        Layer { w, b }
    }

    fn conv_t<T: Scalar>(p: &mut ParamSet<T>, init: &mut Initializer, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        let w = p.push(format!("{name}.weight"), init.weight(vec![in_c, out_c, k, k]));
        let b = p.push(format!("{name}.bias"), init.bias(out_c));
        Layer { w, b }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, bound: &[Var], x: Var, geom: ConvGeom) -> Var {
        g.conv2d(x, bound[self.w], Some(bound[self.b]), geom)
    }

    fn apply_t<T: Scalar>(&self, g: &mut Graph<T>, bound: &[Var], x: Var, geom: ConvGeom) -> Var {
        g.conv_t2d(x, bound[self.w], Some(bound[self.b]), geom)
    }
}

/// Instance norm is skipped on 1x1 maps, where it would zero the signal.
fn norm<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let [_, _, h, w] = g.dims(x);
    if h * w > 1 {
        g.instance_norm(x)
    } else {
        x
    }
}

fn stage_width(base: usize, i: usize) -> usize {
    base << i.min(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
}

/// U-Net with skip connections: 4x4 stride-2 convolutions down (leaky rectifier),
/// 4x4 stride-2 transposed convolutions up (rectifier), sigmoid output.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    spec: UNetSpec,
    params: ParamSet<T>,
    down: Vec<Layer>,
    up: Vec<Layer>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(spec: UNetSpec, seed: u64) -> Self {
        assert!(spec.depth >= 1, "U-Net depth must be at least 1");
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::default();
        let d = spec.depth;
        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let in_c = if i == 0 { spec.in_channels } else { stage_width(spec.base_width, i - 1) };
            down.push(Layer::conv(&mut p, &mut init, &format!("down{i}"), stage_width(spec.base_width, i), in_c, 4));
        }
        // up[j] maps stage j+1 back to the resolution of stage j; up[d-1] is the output layer.
        let mut up = Vec::with_capacity(d);
        for j in (0..d).rev() {
            let in_c = if j == d - 1 { stage_width(spec.base_width, j) } else { 2 * stage_width(spec.base_width, j) };
            let out_c = if j == 0 { spec.out_channels } else { stage_width(spec.base_width, j - 1) };
            up.push(Layer::conv_t(&mut p, &mut init, &format!("up{j}"), in_c, out_c, 4));
        }
        UNet { spec, params: p, down, up }
    }

    pub fn spec(&self) -> UNetSpec {
        self.spec
    }

    pub fn from_params(spec: UNetSpec, params: ParamSet<T>) -> Option<Self> {
        let mut net = Self::new(spec, 0);
        if !same_layout(&net.params, &params) {
            return None;
        }
        net.params = params;
        Some(net)
    }
}

impl<T: Scalar> Module<T> for UNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let [_, c, h, w] = g.dims(x);
        let f = 1 << self.spec.depth;
        assert_eq!(c, self.spec.in_channels, "U-Net expects {} channels, got {c}", self.spec.in_channels);
        assert!(h % f == 0 && w % f == 0, "U-Net input {h}x{w} not divisible by {f}");
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut cur = x;
        for (i, layer) in self.down.iter().enumerate() {
            cur = layer.apply(g, bound, cur, DOWN);
            if i > 0 {
                cur = norm(g, cur);
            }
            cur = g.leaky_relu(cur, LEAK);
            skips.push(cur);
        }
        let d = self.spec.depth;
        for (k, layer) in self.up.iter().enumerate() {
            let j = d - 1 - k;
            if j != d - 1 {
                cur = g.concat(&[cur, skips[j]]);
            }
            cur = layer.apply_t(g, bound, cur, DOWN);
            if j == 0 {
                cur = g.sigmoid(cur);
            } else {
                cur = norm(g, cur);
                cur = g.relu(cur);
            }
        }
        cur
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub in_channels: usize,
    pub layers: usize,
    pub base_width: usize,
}

/// PatchGAN: `layers` stride-2 stages then a 3x3 logit head, emitting one logit per patch.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    spec: PatchSpec,
    params: ParamSet<T>,
    stages: Vec<Layer>,
    head: Layer,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(spec: PatchSpec, seed: u64) -> Self {
        assert!(spec.layers >= 1);
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::default();
        let mut stages = Vec::new();
        for i in 0..spec.layers {
            let in_c = if i == 0 { spec.in_channels } else { stage_width(spec.base_width, i - 1) };
            stages.push(Layer::conv(&mut p, &mut init, &format!("stage{i}"), stage_width(spec.base_width, i), in_c, 4));
        }
        let head = Layer::conv(&mut p, &mut init, "head", 1, stage_width(spec.base_width, spec.layers - 1), 3);
        PatchDiscriminator { spec, params: p, stages, head }
    }

    pub fn spec(&self) -> PatchSpec {
        self.spec
    }

    pub fn from_params(spec: PatchSpec, params: ParamSet<T>) -> Option<Self> {
        let mut net = Self::new(spec, 0);
        if !same_layout(&net.params, &params) {
            return None;
        }
        net.params = params;
        Some(net)
    }
}

impl<T: Scalar> Module<T> for PatchDiscriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let mut cur = x;
        for (i, layer) in self.stages.iter().enumerate() {
            cur = layer.apply(g, bound, cur, DOWN);
            if i > 0 {
                cur = norm(g, cur);
            }
            cur = g.leaky_relu(cur, LEAK);
        }
        self.head.apply(g, bound, cur, SAME3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub in_channels: usize,
    pub base_width: usize,
}

/// Three stride-2 convolution stages, global average pooling and a linear logit.
/// Output is `[n, 1, 1, 1]`.
#[derive(Debug, Clone)]
pub struct DomainClassifier<T> {
    spec: ClassifierSpec,
    params: ParamSet<T>,
    stages: [Layer; 3],
    fc_w: usize,
    fc_b: usize,
}

impl<T: Scalar> DomainClassifier<T> {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::default();
        let w = spec.base_width;
        let stages = [
            Layer::conv(&mut p, &mut init, "stage0", w, spec.in_channels, 4),
            Layer::conv(&mut p, &mut init, "stage1", 2 * w, w, 4),
            Layer::conv(&mut p, &mut init, "stage2", 4 * w, 2 * w, 4),
        ];
        let fc_w = p.push("fc.weight", init.weight(vec![1, 4 * w]));
        let fc_b = p.push("fc.bias", init.bias(1));
        DomainClassifier { spec, params: p, stages, fc_w, fc_b }
    }

    pub fn spec(&self) -> ClassifierSpec {
        self.spec
    }

    pub fn from_params(spec: ClassifierSpec, params: ParamSet<T>) -> Option<Self> {
        let mut net = Self::new(spec, 0);
        if !same_layout(&net.params, &params) {
            return None;
        }
        net.params = params;
        Some(net)
    }
}

impl<T: Scalar> Module<T> for DomainClassifier<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let mut cur = x;
        for layer in &self.stages {
            cur = layer.apply(g, bound, cur, DOWN);
            cur = g.leaky_relu(cur, LEAK);
        }
        let pooled = g.global_avg_pool(cur);
        g.linear(pooled, bound[self.fc_w], bound[self.fc_b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub blocks: usize,
    pub width: usize,
}

/// Full-resolution residual network with a sigmoid head.
#[derive(Debug, Clone)]
pub struct ResNet<T> {
    spec: ResNetSpec,
    params: ParamSet<T>,
    stem: Layer,
    blocks: Vec<(Layer, Layer)>,
    head: Layer,
}

impl<T: Scalar> ResNet<T> {
    pub fn new(spec: ResNetSpec, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::default();
        let stem = Layer::conv(&mut p, &mut init, "stem", spec.width, spec.in_channels, 3);
        let blocks = (0..spec.blocks)
            .map(|i| {
                (
                    Layer::conv(&mut p, &mut init, &format!("block{i}.a"), spec.width, spec.width, 3),
                    Layer::conv(&mut p, &mut init, &format!("block{i}.b"), spec.width, spec.width, 3),
                )
            })
            .collect();
        let head = Layer::conv(&mut p, &mut init, "head", spec.out_channels, spec.width, 3);
        ResNet { spec, params: p, stem, blocks, head }
    }

    pub fn spec(&self) -> ResNetSpec {
        self.spec
    }

    pub fn from_params(spec: ResNetSpec, params: ParamSet<T>) -> Option<Self> {
        let mut net = Self::new(spec, 0);
        if !same_layout(&net.params, &params) {
            return None;
        }
        net.params = params;
        Some(net)
    }

    /// Zeroes the output layer so every pixel maps to `sigmoid(0) = 0.5`.
    pub fn zero_head(&mut self) {
        for t in [self.head.w, self.head.b] {
            self.params.tensors_mut()[t].data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<T: Scalar> Module<T> for ResNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let mut cur = self.stem.apply(g, bound, x, SAME3);
        cur = norm(g, cur);
        cur = g.relu(cur);
        for (a, b) in &self.blocks {
            let mut r = a.apply(g, bound, cur, SAME3);
            r = norm(g, r);
            r = g.relu(r);
            r = b.apply(g, bound, r, SAME3);
            r = norm(g, r);
            cur = g.add(cur, r);
        }
        let out = self.head.apply(g, bound, cur, SAME3);
        g.sigmoid(out)
    }
}

fn same_layout<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(vec![2, c, h, w], (0..2 * c * h * w).map(|i| ((i as f32) * 0.1).sin() * 0.5 + 0.5).collect())
            .unwrap()
    }

    #[test]
    fn unet_preserves_spatial_dims() {
        for depth in 1..=4 {
            let net = UNet::<f32>::new(UNetSpec { in_channels: 5, out_channels: 3, depth, base_width: 4 }, 1);
            let y = net.infer(&input(5, 32, 16));
            assert_eq!(y.shape(), &[2, 3, 32, 16]);
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn patch_output_is_input_over_two_to_the_layers() {
        let d = PatchDiscriminator::<f32>::new(PatchSpec { in_channels: 3, layers: 3, base_width: 4 }, 2);
        assert_eq!(d.infer(&input(3, 64, 40)).shape(), &[2, 1, 8, 5]);
        assert_eq!(d.infer(&input(3, 30, 30)).shape(), &[2, 1, 3, 3]);
    }

    #[test]
    fn classifier_emits_one_logit_per_sample() {
        let c = DomainClassifier::<f32>::new(ClassifierSpec { in_channels: 31, base_width: 4 }, 3);
        assert_eq!(c.infer(&input(31, 16, 16)).shape(), &[2, 1, 1, 1]);
    }

    #[test]
    fn resnet_zero_head_gives_one_half() {
        let mut r = ResNet::<f32>::new(ResNetSpec { in_channels: 31, out_channels: 3, blocks: 2, width: 8 }, 4);
        r.zero_head();
        let y = r.infer(&input(31, 8, 8));
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = UNetSpec { in_channels: 3, out_channels: 3, depth: 2, base_width: 4 };
        assert_eq!(UNet::<f32>::new(spec, 9).params().digest(), UNet::<f32>::new(spec, 9).params().digest());
        assert_ne!(UNet::<f32>::new(spec, 9).params().digest(), UNet::<f32>::new(spec, 10).params().digest());
    }
}
