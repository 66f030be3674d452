//! Hazy-to-hyperspectral reconstruction: generators `G_x` (spanned RGB -> 31 bands) and
//! `G_h` (31 bands -> RGB), PatchGAN discriminators `D_x`/`D_h`, a hazy/clear domain
//! classifier `C`, their losses, and one alternating optimization step.

use serde::{Deserialize, Serialize};
use skygan_nn::{
    Adam, AdamConfig, ClassifierSpec, DomainClassifier, Graph, Module, PatchDiscriminator, PatchSpec, Scalar, Tensor,
    UNet, UNetSpec, Var,
};

use crate::color::{anchor_rgb_var, span_channels, span_var, BANDS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct H2HSpec {
    pub depth: usize,
    pub base_width: usize,
    pub disc_layers: usize,
    pub disc_width: usize,
    pub classifier_width: usize,
}

impl Default for H2HSpec {
    fn default() -> Self {
        H2HSpec { depth: 4, base_width: 32, disc_layers: 3, disc_width: 32, classifier_width: 32 }
    }
}

impl H2HSpec {
    pub fn gx(&self) -> UNetSpec {
        UNetSpec { in_channels: BANDS, out_channels: BANDS, depth: self.depth, base_width: self.base_width }
    }

    pub fn gh(&self) -> UNetSpec {
        UNetSpec { in_channels: BANDS, out_channels: 3, depth: self.depth, base_width: self.base_width }
    }

    pub fn dx(&self) -> PatchSpec {
        PatchSpec { in_channels: BANDS, layers: self.disc_layers, base_width: self.disc_width }
    }

    pub fn dh(&self) -> PatchSpec {
        PatchSpec { in_channels: 3, layers: self.disc_layers, base_width: self.disc_width }
    }

    pub fn classifier(&self) -> ClassifierSpec {
        ClassifierSpec { in_channels: BANDS, base_width: self.classifier_width }
    }

    /// Spatial sizes must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H2HWeights {
    pub gan: f64,
    pub cyc: f64,
    pub idt: f64,
    pub cls: f64,
}

impl Default for H2HWeights {
    fn default() -> Self {
        H2HWeights { gan: 1.0, cyc: 10.0, idt: 5.0, cls: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct H2HBundle<T> {
    pub spec: H2HSpec,
    pub weights: H2HWeights,
    pub gx: UNet<T>,
    pub gh: UNet<T>,
    pub dx: PatchDiscriminator<T>,
    pub dh: PatchDiscriminator<T>,
    pub cls: DomainClassifier<T>,
}

impl<T: Scalar> H2HBundle<T> {
    pub fn new(spec: H2HSpec, weights: H2HWeights, seed: u64) -> Self {
        let s = |name: &str| derive_seed(seed, &["h2h".into(), name.into()]);
        H2HBundle {
            spec,
            weights,
            gx: UNet::new(spec.gx(), s("gx")),
            gh: UNet::new(spec.gh(), s("gh")),
            dx: PatchDiscriminator::new(spec.dx(), s("dx")),
            dh: PatchDiscriminator::new(spec.dh(), s("dh")),
            cls: DomainClassifier::new(spec.classifier(), s("cls")),
        }
    }

    /// Digest of the generator parameters (`G_x`, `G_h`).
    pub fn generator_digest(&self) -> String {
        format!("{}{}", self.gx.params().digest(), self.gh.params().digest())
    }

    /// Digest of the discriminator and classifier parameters.
    pub fn critic_digest(&self) -> String {
        format!("{}{}{}", self.dx.params().digest(), self.dh.params().digest(), self.cls.params().digest())
    }

    pub fn all_finite(&self) -> bool {
        self.gx.params().all_finite()
            && self.gh.params().all_finite()
            && self.dx.params().all_finite()
            && self.dh.params().all_finite()
            && self.cls.params().all_finite()
    }
}

/// One Adam state per network.
#[derive(Debug, Clone, PartialEq)]
pub struct H2HOptim<T> {
    pub gx: Adam<T>,
    pub gh: Adam<T>,
    pub dx: Adam<T>,
    pub dh: Adam<T>,
    pub cls: Adam<T>,
}

impl<T: Scalar> H2HOptim<T> {
    pub fn new(config: AdamConfig, b: &H2HBundle<T>) -> Self {
        H2HOptim {
            gx: Adam::new(config, b.gx.params()),
            gh: Adam::new(config, b.gh.params()),
            dx: Adam::new(config, b.dx.params()),
            dh: Adam::new(config, b.dh.params()),
            cls: Adam::new(config, b.cls.params()),
        }
    }
}

/// Paired hazy/clean RGB plus unpaired spectral cubes, all NCHW.
#[derive(Debug, Clone)]
pub struct H2HBatch<T> {
    /// Spanned hazy input, `[n, 31, h, w]`.
    pub x_spanned: Tensor<T>,
    /// Clean RGB paired with `x`, `[n, 3, h, w]`.
    pub y_clean: Tensor<T>,
    /// Unpaired spectral cubes, `[m, 31, h, w]`.
    pub h: Tensor<T>,
}

impl<T: Scalar> H2HBatch<T> {
    /// Spans the hazy images and stacks everything into tensors.
    pub fn from_images(hazy: &[&ImageTensor], clean: &[&ImageTensor], cubes: &[&ImageTensor]) -> Result<Self> {
        let spanned: Vec<ImageTensor> = hazy.iter().map(|x| span_channels(x)).collect::<Result<_>>()?;
        let spanned_refs: Vec<&ImageTensor> = spanned.iter().collect();
        Ok(H2HBatch {
            x_spanned: crate::image::batch_tensor(&spanned_refs)?,
            y_clean: crate::image::batch_tensor(clean)?,
            h: crate::image::batch_tensor(cubes)?,
        })
    }

    fn validate(&self, spec: &H2HSpec) -> Result<()> {
        let [n, c, h, w] = self.x_spanned.dims4();
        let [yn, yc, yh, yw] = self.y_clean.dims4();
        let [hn, hc, hh, hw] = self.h.dims4();
        if c != BANDS || hc != BANDS || yc != 3 {
            return Err(Error::dim("h2h batch", format!("channels x={c} h={hc} y={yc}, expected 31/31/3")));
        }
        if (yn, yh, yw) != (n, h, w) {
            return Err(Error::dim("h2h batch", "clean images must match the hazy batch"));
        }
        if (hh, hw) != (h, w) || hn == 0 || n == 0 {
            return Err(Error::dim("h2h batch", "spectral cubes must be non-empty and match the RGB size"));
        }
        let m = spec.multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::dim("h2h batch", format!("{h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// Adversarial value of `D_x` on reconstructed vs real cubes.
    pub l_x: f64,
    /// Adversarial value of `D_h` on `G_h(h)` vs real hazy RGB.
    pub l_h: f64,
    pub l_gan: f64,
    pub l_cyc: f64,
    pub l_idt: f64,
    /// Domain-classifier cross-entropy.
    pub l_cls: f64,
    /// Weighted generator objective.
    pub total: f64,
}

/// `mean log(1 - sigmoid(fake)) + mean log sigmoid(real)`; the value both
/// discriminators maximize.
pub fn adversarial_value<T: Scalar>(g: &mut Graph<T>, fake_logits: Var, real_logits: Var) -> Var {
    let fake = g.mean_log_sigmoid(fake_logits, false);
    let real = g.mean_log_sigmoid(real_logits, true);
    g.add(fake, real)
}

/// Non-saturating generator term `-mean log sigmoid(D(G(.)))`.
pub fn generator_adversarial<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let v = g.mean_log_sigmoid(fake_logits, true);
    g.scale(v, -1.0)
}

/// Binary cross-entropy of the domain classifier with hazy = 1 and clear = 0, averaged
/// over all samples of both batches.
pub fn classifier_bce<T: Scalar>(g: &mut Graph<T>, hazy_logits: Var, clear_logits: Var) -> Var {
    let n1 = g.value(hazy_logits).len() as f64;
    let n0 = g.value(clear_logits).len() as f64;
    let pos = g.mean_log_sigmoid(hazy_logits, true);
    let neg = g.mean_log_sigmoid(clear_logits, false);
    g.weighted_sum(&[(pos, -n1 / (n1 + n0)), (neg, -n0 / (n1 + n0))])
}

fn eval_scalar<T: Scalar>(build: impl FnOnce(&mut Graph<T>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).item().to_f64().unwrap_or(f64::NAN)
}

/// Value of the `D_x` objective on fixed logits.
pub fn loss_adversarial_x<T: Scalar>(fake_logits: &Tensor<T>, real_logits: &Tensor<T>) -> f64 {
    eval_scalar(|g| {
        let f = g.constant(fake_logits.clone());
        let r = g.constant(real_logits.clone());
        adversarial_value(g, f, r)
    })
}

/// Value of the `D_h` objective on fixed logits (same form as [`loss_adversarial_x`]).
pub fn loss_adversarial_h<T: Scalar>(fake_logits: &Tensor<T>, real_logits: &Tensor<T>) -> f64 {
    loss_adversarial_x(fake_logits, real_logits)
}

/// `(classifier_loss, generator_penalty)`; the penalty is the negated loss, so
/// minimizing it pushes `G_x` to maximize the classifier's error.
pub fn loss_domain_classifier<T: Scalar>(hazy_logits: &Tensor<T>, clear_logits: &Tensor<T>) -> Result<(f64, f64)> {
    if hazy_logits.is_empty() || clear_logits.is_empty() {
        return Err(Error::dim("loss_domain_classifier", "both batches must be non-empty"));
    }
    let l = eval_scalar(|g| {
        let a = g.constant(hazy_logits.clone());
        let b = g.constant(clear_logits.clone());
        classifier_bce(g, a, b)
    });
    Ok((l, -l))
}

/// Parameters of every H2H network bound on one tape.
pub struct BoundH2H {
    pub gx: Vec<Var>,
    pub gh: Vec<Var>,
    pub dx: Vec<Var>,
    pub dh: Vec<Var>,
    pub cls: Vec<Var>,
}

impl BoundH2H {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, b: &H2HBundle<T>, generators: bool, critics: bool) -> Self {
        BoundH2H {
            gx: b.gx.params().bind(g, generators),
            gh: b.gh.params().bind(g, generators),
            dx: b.dx.params().bind(g, critics),
            dh: b.dh.params().bind(g, critics),
            cls: b.cls.params().bind(g, critics),
        }
    }
}

/// `mse(y, G_h(G_x(x))) + mse(h, G_x(span(G_h(h))))`. Also returns `G_x(x)`.
#[allow(clippy::too_many_arguments)]
pub fn cycle_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    gx: &dyn Module<T>,
    pgx: &[Var],
    gh: &dyn Module<T>,
    pgh: &[Var],
    x_spanned: Var,
    y_clean: Var,
    h: Var,
) -> Result<(Var, Var)> {
    let h_hat = gx.forward(g, pgx, x_spanned);
    let y_hat = gh.forward(g, pgh, h_hat);
    if g.dims(y_hat) != g.dims(y_clean) {
        return Err(Error::dim(
            "loss_cycle",
            format!("G_h output {:?} vs clean {:?}", g.dims(y_hat), g.dims(y_clean)),
        ));
    }
    let task = g.mse(y_hat, y_clean);
    let rgb_of_h = gh.forward(g, pgh, h);
    let respanned = span_var(g, rgb_of_h);
    let h_back = gx.forward(g, pgx, respanned);
    let spectral = g.mse(h_back, h);
    Ok((g.add(task, spectral), h_hat))
}

/// `mse(h, G_x(h)) + mse(rgb(x), G_h(x_spanned))`.
pub fn identity_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    gx: &dyn Module<T>,
    pgx: &[Var],
    gh: &dyn Module<T>,
    pgh: &[Var],
    x_spanned: Var,
    h: Var,
) -> Var {
    let gx_h = gx.forward(g, pgx, h);
    let a = g.mse(gx_h, h);
    let gh_x = gh.forward(g, pgh, x_spanned);
    let x_rgb = anchor_rgb_var(g, x_spanned);
    let c = g.mse(gh_x, x_rgb);
    g.add(a, c)
}

/// Cycle loss value for a batch (no gradients).
pub fn loss_cycle<T: Scalar>(gx: &dyn Module<T>, gh: &dyn Module<T>, batch: &H2HBatch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let pgx = gx.params().bind(&mut g, false);
    let pgh = gh.params().bind(&mut g, false);
    let x = g.constant(batch.x_spanned.clone());
    let y = g.constant(batch.y_clean.clone());
    let h = g.constant(batch.h.clone());
    let (l, _) = cycle_loss_graph(&mut g, gx, &pgx, gh, &pgh, x, y, h)?;
    Ok(g.value(l).item().to_f64().unwrap_or(f64::NAN))
}

/// Identity loss value for a batch (no gradients).
pub fn loss_identity<T: Scalar>(gx: &dyn Module<T>, gh: &dyn Module<T>, batch: &H2HBatch<T>) -> f64 {
    let mut g = Graph::new();
    let pgx = gx.params().bind(&mut g, false);
    let pgh = gh.params().bind(&mut g, false);
    let x = g.constant(batch.x_spanned.clone());
    let h = g.constant(batch.h.clone());
    let l = identity_loss_graph(&mut g, gx, &pgx, gh, &pgh, x, h);
    g.value(l).item().to_f64().unwrap_or(f64::NAN)
}

/// Critic objective: `-L_x - L_h + L_cls`. Returns `(objective, l_x, l_h, l_cls)`.
pub fn critic_objective<T: Scalar>(
    g: &mut Graph<T>,
    b: &H2HBundle<T>,
    p: &BoundH2H,
    x_spanned: Var,
    y_clean: Var,
    h: Var,
) -> (Var, Var, Var, Var) {
    // Generator outputs are cut from the tape: only critics receive gradients here.
    let h_hat = b.gx.forward(g, &p.gx, x_spanned);
    let h_hat = g.detach(h_hat);
    let rgb_of_h = b.gh.forward(g, &p.gh, h);
    let rgb_of_h = g.detach(rgb_of_h);
    let y_spanned = span_var(g, y_clean);
    let h_clear = b.gx.forward(g, &p.gx, y_spanned);
    let h_clear = g.detach(h_clear);
    let x_rgb = anchor_rgb_var(g, x_spanned);

    let dx_fake = b.dx.forward(g, &p.dx, h_hat);
    let dx_real = b.dx.forward(g, &p.dx, h);
    let l_x = adversarial_value(g, dx_fake, dx_real);
    let dh_fake = b.dh.forward(g, &p.dh, rgb_of_h);
    let dh_real = b.dh.forward(g, &p.dh, x_rgb);
    let l_h = adversarial_value(g, dh_fake, dh_real);
    let c_hazy = b.cls.forward(g, &p.cls, h_hat);
    let c_clear = b.cls.forward(g, &p.cls, h_clear);
    let l_cls = classifier_bce(g, c_hazy, c_clear);
    let obj = g.weighted_sum(&[(l_x, -1.0), (l_h, -1.0), (l_cls, 1.0)]);
    (obj, l_x, l_h, l_cls)
}

/// Generator objective. Returns `(objective, l_cyc, l_idt)`.
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    b: &H2HBundle<T>,
    p: &BoundH2H,
    x_spanned: Var,
    y_clean: Var,
    h: Var,
) -> Result<(Var, Var, Var)> {
    let w = b.weights;
    let (l_cyc, h_hat) = cycle_loss_graph(g, &b.gx, &p.gx, &b.gh, &p.gh, x_spanned, y_clean, h)?;
    let rgb_of_h = b.gh.forward(g, &p.gh, h);
    let dx_fake = b.dx.forward(g, &p.dx, h_hat);
    let adv_x = generator_adversarial(g, dx_fake);
    let dh_fake = b.dh.forward(g, &p.dh, rgb_of_h);
    let adv_h = generator_adversarial(g, dh_fake);
    let l_idt = identity_loss_graph(g, &b.gx, &p.gx, &b.gh, &p.gh, x_spanned, h);
    let y_spanned = span_var(g, y_clean);
    let h_clear = b.gx.forward(g, &p.gx, y_spanned);
    let c_hazy = b.cls.forward(g, &p.cls, h_hat);
    let c_clear = b.cls.forward(g, &p.cls, h_clear);
    let cls = classifier_bce(g, c_hazy, c_clear);
    let obj = g.weighted_sum(&[
        (adv_x, w.gan),
        (adv_h, w.gan),
        (l_cyc, w.cyc),
        (l_idt, w.idt),
        (cls, -w.cls),
    ]);
    Ok((obj, l_cyc, l_idt))
}

fn finite<T: Scalar>(g: &Graph<T>, v: Var, term: &'static str, step: u64) -> Result<f64> {
    let x = g.value(v).item().to_f64().unwrap_or(f64::NAN);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

fn grads<T: Scalar>(g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
    vars.iter().map(|&v| g.grad(v)).collect()
}

/// One alternating update: critics (`D_x`, `D_h`, `C`) with generators frozen, then
/// generators against the updated critics.
pub fn train_h2h_step<T: Scalar>(
    b: &mut H2HBundle<T>,
    opt: &mut H2HOptim<T>,
    batch: &H2HBatch<T>,
    step: u64,
) -> Result<LossReport> {
    batch.validate(&b.spec)?;

    let mut g = Graph::new();
    let p = BoundH2H::bind(&mut g, b, false, true);
    let x = g.constant(batch.x_spanned.clone());
    let y = g.constant(batch.y_clean.clone());
    let h = g.constant(batch.h.clone());
    let (obj, l_x, l_h, l_cls) = critic_objective(&mut g, b, &p, x, y, h);
    let l_x = finite(&g, l_x, "l_x", step)?;
    let l_h = finite(&g, l_h, "l_h", step)?;
    let l_cls = finite(&g, l_cls, "l_cls", step)?;
    g.backward(obj);
    let (gdx, gdh, gcls) = (grads(&g, &p.dx), grads(&g, &p.dh), grads(&g, &p.cls));
    drop(g);
    opt.dx.update(b.dx.params_mut(), &gdx);
    opt.dh.update(b.dh.params_mut(), &gdh);
    opt.cls.update(b.cls.params_mut(), &gcls);

    let mut g = Graph::new();
    let p = BoundH2H::bind(&mut g, b, true, false);
    let x = g.constant(batch.x_spanned.clone());
    let y = g.constant(batch.y_clean.clone());
    let h = g.constant(batch.h.clone());
    let (obj, l_cyc, l_idt) = generator_objective(&mut g, b, &p, x, y, h)?;
    let l_cyc = finite(&g, l_cyc, "l_cyc", step)?;
    let l_idt = finite(&g, l_idt, "l_idt", step)?;
    let total = finite(&g, obj, "total", step)?;
    g.backward(obj);
    let (ggx, ggh) = (grads(&g, &p.gx), grads(&g, &p.gh));
    drop(g);
    opt.gx.update(b.gx.params_mut(), &ggx);
    opt.gh.update(b.gh.params_mut(), &ggh);
    if !b.all_finite() {
        return Err(Error::NonFinite { term: "parameters", step });
    }

    Ok(LossReport { step, l_x, l_h, l_gan: l_x + l_h, l_cyc, l_idt, l_cls, total })
}

/// `G_x(span(x))`, clamped to `[0, 1]`: a 31-band cube with the input's size.
pub fn reconstruct_hsi<M: Module<f32>>(gx: &M, multiple: usize, x_rgb: &ImageTensor) -> Result<ImageTensor> {
    if x_rgb.channels() != 3 {
        return Err(Error::dim("reconstruct_hsi", format!("expected RGB, got {} channels", x_rgb.channels())));
    }
    if !x_rgb.height().is_multiple_of(multiple) || !x_rgb.width().is_multiple_of(multiple) {
        return Err(Error::dim(
            "reconstruct_hsi",
            format!("{}x{} is not divisible by {multiple}", x_rgb.height(), x_rgb.width()),
        ));
    }
    let spanned = span_channels(x_rgb)?;
    let out = gx.infer(&spanned.to_tensor::<f32>());
    ImageTensor::from_tensor(&out, 0)
}
