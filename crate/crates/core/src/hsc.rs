//! Hyperspectral catalyst: a residual network `G_r` mapping reconstructed 31-band cubes
//! to a 3-channel feature image, trained against the clean RGB with a mean-L1 loss.

use serde::{Deserialize, Serialize};
use skygan_nn::{Adam, Graph, Module, ResNet, ResNetSpec, Scalar, Tensor, Var};

use crate::color::BANDS;
use crate::error::{Error, Result};
use crate::h2h::H2HBundle;
use crate::image::ImageTensor;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalystSpec {
    pub residual_blocks: usize,
    pub width: usize,
}

impl Default for CatalystSpec {
    fn default() -> Self {
        CatalystSpec { residual_blocks: 4, width: 64 }
    }
}

impl CatalystSpec {
    pub fn net(&self) -> ResNetSpec {
        ResNetSpec { in_channels: BANDS, out_channels: 3, blocks: self.residual_blocks, width: self.width }
    }
}

#[derive(Debug, Clone)]
pub struct CatalystNet<T> {
    pub spec: CatalystSpec,
    pub net: ResNet<T>,
}

impl<T: Scalar> CatalystNet<T> {
    pub fn new(spec: CatalystSpec, seed: u64) -> Self {
        CatalystNet { spec, net: ResNet::new(spec.net(), derive_seed(seed, &["hsc".into(), "gr".into()])) }
    }
}

/// `G_r(cube)`: a 3-channel image with the cube's size.
pub fn catalyst<M: Module<f32>>(net: &M, cube: &ImageTensor) -> Result<ImageTensor> {
    if cube.channels() != BANDS {
        return Err(Error::dim("catalyst", format!("expected {BANDS} bands, got {}", cube.channels())));
    }
    let out = net.infer(&cube.to_tensor::<f32>());
    ImageTensor::from_tensor(&out, 0)
}

/// Mean absolute error between the clean image and the catalyst prediction.
pub fn loss_hsc<T: Scalar>(y_clean: &Tensor<T>, predicted: &Tensor<T>) -> Result<f64> {
    if y_clean.shape() != predicted.shape() {
        return Err(Error::dim(
            "loss_hsc",
            format!("clean {:?} vs prediction {:?}", y_clean.shape(), predicted.shape()),
        ));
    }
    let mut g = Graph::new();
    let a = g.constant(y_clean.clone());
    let b = g.constant(predicted.clone());
    let l = g.mae(a, b);
    Ok(g.value(l).item().to_f64().unwrap_or(f64::NAN))
}

/// `mae(y, G_r(x))` on a tape where `cube` is the (already reconstructed) input.
pub fn hsc_loss_graph<T: Scalar>(g: &mut Graph<T>, net: &CatalystNet<T>, bound: &[Var], cube: Var, y: Var) -> Var {
    let pred = net.net.forward(g, bound, cube);
    g.mae(pred, y)
}

/// Reconstructed cubes `G_x(span(x))` for a spanned batch, without gradients.
pub fn reconstruct_batch<T: Scalar>(h2h: &H2HBundle<T>, x_spanned: &Tensor<T>) -> Tensor<T> {
    h2h.gx.infer(x_spanned)
}

/// One Adam step of `G_r` on `mae(y, G_r(G_x(span(x))))`. `G_x` is only read.
pub fn train_hsc_step<T: Scalar>(
    net: &mut CatalystNet<T>,
    opt: &mut Adam<T>,
    h2h: &H2HBundle<T>,
    x_spanned: &Tensor<T>,
    y_clean: &Tensor<T>,
    step: u64,
) -> Result<f64> {
    let [n, c, h, w] = x_spanned.dims4();
    if c != BANDS || y_clean.shape() != [n, 3, h, w] {
        return Err(Error::dim(
            "hsc batch",
            format!("spanned {:?} vs clean {:?}", x_spanned.shape(), y_clean.shape()),
        ));
    }
    let m = h2h.spec.multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::dim("hsc batch", format!("{h}x{w} is not divisible by {m}")));
    }
    let cube = reconstruct_batch(h2h, x_spanned).map(|v| v.max(T::zero()).min(T::one()));
    fit_hsc_step(net, opt, &cube, y_clean, step)
}

/// One Adam step of `G_r` on already reconstructed cubes.
pub fn fit_hsc_step<T: Scalar>(
    net: &mut CatalystNet<T>,
    opt: &mut Adam<T>,
    cube: &Tensor<T>,
    y_clean: &Tensor<T>,
    step: u64,
) -> Result<f64> {
    let [n, c, h, w] = cube.dims4();
    if c != BANDS || y_clean.shape() != [n, 3, h, w] {
        return Err(Error::dim("hsc batch", format!("cube {:?} vs clean {:?}", cube.shape(), y_clean.shape())));
    }
    let mut g = Graph::new();
    let bound = net.net.params().bind(&mut g, true);
    let cv = g.constant(cube.clone());
    let yv = g.constant(y_clean.clone());
    let l = hsc_loss_graph(&mut g, net, &bound, cv, yv);
    let loss = g.value(l).item().to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::NonFinite { term: "l_r", step });
    }
    g.backward(l);
    let grads: Vec<Tensor<T>> = bound.iter().map(|&v| g.grad(v)).collect();
    drop(g);
    opt.update(net.net.params_mut(), &grads);
    if !net.net.params().all_finite() {
        return Err(Error::NonFinite { term: "parameters", step });
    }
    Ok(loss)
}
