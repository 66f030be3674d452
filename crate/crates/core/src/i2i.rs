//! Conditional-GAN dehazer `G_z`/`D_z` over the 15-channel multi-cue + catalyst input,
//! and the end-to-end dehazing pipeline.

use serde::{Deserialize, Serialize};
use skygan_nn::{Adam, AdamConfig, Graph, Module, PatchDiscriminator, PatchSpec, ResNet, Scalar, Tensor, UNet, UNetSpec, Var};

use crate::color::{assemble_multicue, span_channels, ANCHOR_BANDS, BANDS, MULTICUE_CHANNELS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed::derive_seed;

pub const I2I_CHANNELS: usize = MULTICUE_CHANNELS + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct I2ISpec {
    pub depth: usize,
    pub base_width: usize,
    pub disc_layers: usize,
    pub disc_width: usize,
}

impl Default for I2ISpec {
    fn default() -> Self {
        I2ISpec { depth: 4, base_width: 32, disc_layers: 3, disc_width: 32 }
    }
}

impl I2ISpec {
    pub fn gz(&self) -> UNetSpec {
        UNetSpec { in_channels: I2I_CHANNELS, out_channels: 3, depth: self.depth, base_width: self.base_width }
    }

    /// The discriminator sees the conditioning stacked with the candidate image.
    pub fn dz(&self) -> PatchSpec {
        PatchSpec { in_channels: I2I_CHANNELS + 3, layers: self.disc_layers, base_width: self.disc_width }
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone)]
pub struct I2IBundle<T> {
    pub spec: I2ISpec,
    /// Weight of the L1 reconstruction term.
    pub lambda_l1: f64,
    pub gz: UNet<T>,
    pub dz: PatchDiscriminator<T>,
}

impl<T: Scalar> I2IBundle<T> {
    pub fn new(spec: I2ISpec, lambda_l1: f64, seed: u64) -> Self {
        let s = |name: &str| derive_seed(seed, &["i2i".into(), name.into()]);
        I2IBundle { spec, lambda_l1, gz: UNet::new(spec.gz(), s("gz")), dz: PatchDiscriminator::new(spec.dz(), s("dz")) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct I2IOptim<T> {
    pub gz: Adam<T>,
    pub dz: Adam<T>,
}

impl<T: Scalar> I2IOptim<T> {
    pub fn new(config: AdamConfig, b: &I2IBundle<T>) -> Self {
        I2IOptim { gz: Adam::new(config, b.gz.params()), dz: Adam::new(config, b.dz.params()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct I2IReport {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_loss: f64,
}

/// `[multicue(x) | catalyst]`, 15 channels.
pub fn assemble_i2i_input(x_rgb: &ImageTensor, catalyst: &ImageTensor) -> Result<ImageTensor> {
    if catalyst.channels() != 3 {
        return Err(Error::dim("assemble_i2i_input", format!("catalyst has {} channels", catalyst.channels())));
    }
    if (x_rgb.height(), x_rgb.width()) != (catalyst.height(), catalyst.width()) {
        return Err(Error::dim(
            "assemble_i2i_input",
            format!(
                "input {}x{} vs catalyst {}x{}",
                x_rgb.height(),
                x_rgb.width(),
                catalyst.height(),
                catalyst.width()
            ),
        ));
    }
    let cues = assemble_multicue(x_rgb)?;
    ImageTensor::concat_channels(&[&cues, catalyst])
}

/// `0.5 * (BCE(real, 1) + BCE(fake, 0))` on a tape.
pub fn discriminator_loss_graph<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let r = g.mean_log_sigmoid(real_logits, true);
    let f = g.mean_log_sigmoid(fake_logits, false);
    g.weighted_sum(&[(r, -0.5), (f, -0.5)])
}

/// `(g_loss, g_adv, g_l1)` on a tape.
pub fn generator_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    fake: Var,
    y_clean: Var,
    fake_logits: Var,
    lambda_l1: f64,
) -> (Var, Var, Var) {
    let adv = g.mean_log_sigmoid(fake_logits, true);
    let l1 = g.mae(fake, y_clean);
    let total = g.weighted_sum(&[(adv, -1.0), (l1, lambda_l1)]);
    (total, adv, l1)
}

/// `(g_loss, d_loss)` for fixed generator output and discriminator logits.
pub fn loss_i2i<T: Scalar>(
    fake: &Tensor<T>,
    y_clean: &Tensor<T>,
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
    lambda_l1: f64,
) -> Result<(f64, f64)> {
    if fake.shape() != y_clean.shape() {
        return Err(Error::dim("loss_i2i", format!("output {:?} vs clean {:?}", fake.shape(), y_clean.shape())));
    }
    let mut g = Graph::new();
    let f = g.constant(fake.clone());
    let y = g.constant(y_clean.clone());
    let rl = g.constant(real_logits.clone());
    let fl = g.constant(fake_logits.clone());
    let (gl, _, _) = generator_loss_graph(&mut g, f, y, fl, lambda_l1);
    let dl = discriminator_loss_graph(&mut g, rl, fl);
    let gl = g.value(gl).item().to_f64().unwrap_or(f64::NAN);
    let dl = g.value(dl).item().to_f64().unwrap_or(f64::NAN);
    if !gl.is_finite() || !dl.is_finite() {
        return Err(Error::NonFinite { term: "i2i", step: 0 });
    }
    Ok((gl, dl))
}

fn finite(v: f64, term: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

/// One discriminator update followed by one generator update.
pub fn train_i2i_step<T: Scalar>(
    b: &mut I2IBundle<T>,
    opt: &mut I2IOptim<T>,
    input: &Tensor<T>,
    y_clean: &Tensor<T>,
    step: u64,
) -> Result<I2IReport> {
    let [n, c, h, w] = input.dims4();
    if c != I2I_CHANNELS || y_clean.shape() != [n, 3, h, w] {
        return Err(Error::dim("i2i batch", format!("input {:?} vs clean {:?}", input.shape(), y_clean.shape())));
    }
    let m = b.spec.multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::dim("i2i batch", format!("{h}x{w} is not divisible by {m}")));
    }

    let mut g = Graph::new();
    let pz = b.gz.params().bind(&mut g, false);
    let pd = b.dz.params().bind(&mut g, true);
    let xv = g.constant(input.clone());
    let yv = g.constant(y_clean.clone());
    let fake = b.gz.forward(&mut g, &pz, xv);
    let fake = g.detach(fake);
    let real_pair = g.concat(&[xv, yv]);
    let fake_pair = g.concat(&[xv, fake]);
    let rl = b.dz.forward(&mut g, &pd, real_pair);
    let fl = b.dz.forward(&mut g, &pd, fake_pair);
    let dl = discriminator_loss_graph(&mut g, rl, fl);
    let d_loss = finite(g.value(dl).item().to_f64().unwrap_or(f64::NAN), "d_loss", step)?;
    g.backward(dl);
    let grads: Vec<Tensor<T>> = pd.iter().map(|&v| g.grad(v)).collect();
    drop(g);
    opt.dz.update(b.dz.params_mut(), &grads);

    let mut g = Graph::new();
    let pz = b.gz.params().bind(&mut g, true);
    let pd = b.dz.params().bind(&mut g, false);
    let xv = g.constant(input.clone());
    let yv = g.constant(y_clean.clone());
    let fake = b.gz.forward(&mut g, &pz, xv);
    let fake_pair = g.concat(&[xv, fake]);
    let fl = b.dz.forward(&mut g, &pd, fake_pair);
    let (gl, adv, l1) = generator_loss_graph(&mut g, fake, yv, fl, b.lambda_l1);
    let g_loss = finite(g.value(gl).item().to_f64().unwrap_or(f64::NAN), "g_loss", step)?;
    let g_adv = -g.value(adv).item().to_f64().unwrap_or(f64::NAN);
    let g_l1 = g.value(l1).item().to_f64().unwrap_or(f64::NAN);
    g.backward(gl);
    let grads: Vec<Tensor<T>> = pz.iter().map(|&v| g.grad(v)).collect();
    drop(g);
    opt.gz.update(b.gz.params_mut(), &grads);
    if !b.gz.params().all_finite() || !b.dz.params().all_finite() {
        return Err(Error::NonFinite { term: "parameters", step });
    }
    Ok(I2IReport { step, d_loss, g_adv, g_l1, g_loss })
}

/// One pipeline stage operating on a single `[1, c, h, w]` tensor.
pub trait Stage: Sync {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn run(&self, x: &Tensor<f32>) -> Tensor<f32>;
}

impl Stage for UNet<f32> {
    fn in_channels(&self) -> usize {
        self.spec().in_channels
    }

    fn out_channels(&self) -> usize {
        self.spec().out_channels
    }

    fn run(&self, x: &Tensor<f32>) -> Tensor<f32> {
        self.infer(x)
    }
}

impl Stage for ResNet<f32> {
    fn in_channels(&self) -> usize {
        self.spec().in_channels
    }

    fn out_channels(&self) -> usize {
        self.spec().out_channels
    }

    fn run(&self, x: &Tensor<f32>) -> Tensor<f32> {
        self.infer(x)
    }
}

/// Parameter-free stage that copies selected input channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSelect {
    pub in_channels: usize,
    pub indices: Vec<usize>,
}

impl ChannelSelect {
    pub fn identity(channels: usize) -> Self {
        ChannelSelect { in_channels: channels, indices: (0..channels).collect() }
    }
}

impl Stage for ChannelSelect {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_channels(&self) -> usize {
        self.indices.len()
    }

    fn run(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let [n, c, h, w] = x.dims4();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * self.indices.len() * plane);
        for b in 0..n {
            for &k in &self.indices {
                let start = (b * c + k) * plane;
                out.extend_from_slice(&x.data()[start..start + plane]);
            }
        }
        Tensor::from_vec(vec![n, self.indices.len(), h, w], out).expect("consistent shape")
    }
}

/// The three inference stages plus the size multiple they require.
pub struct Pipeline<'a> {
    pub gx: &'a dyn Stage,
    pub gr: &'a dyn Stage,
    pub gz: &'a dyn Stage,
    pub multiple: usize,
}

impl Pipeline<'static> {
    /// Stub pipeline whose output equals its input: `G_x` is the identity on the spanned
    /// cube, `G_r` reads the anchor bands back (which reproduce the input RGB), and
    /// `G_z` returns the catalyst channels.
    pub fn identity() -> Self {
        static GX: std::sync::OnceLock<ChannelSelect> = std::sync::OnceLock::new();
        static GR: std::sync::OnceLock<ChannelSelect> = std::sync::OnceLock::new();
        static GZ: std::sync::OnceLock<ChannelSelect> = std::sync::OnceLock::new();
        Pipeline {
            gx: GX.get_or_init(|| ChannelSelect::identity(BANDS)),
            gr: GR.get_or_init(|| ChannelSelect { in_channels: BANDS, indices: ANCHOR_BANDS.to_vec() }),
            gz: GZ.get_or_init(|| ChannelSelect {
                in_channels: I2I_CHANNELS,
                indices: vec![MULTICUE_CHANNELS, MULTICUE_CHANNELS + 1, MULTICUE_CHANNELS + 2],
            }),
            multiple: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    pub spanned: ImageTensor,
    pub cube: ImageTensor,
    pub catalyst: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DehazeResult {
    pub dehazed: ImageTensor,
    pub intermediates: Option<Intermediates>,
}

fn run_stage(stage: &dyn Stage, name: &'static str, input: &ImageTensor, expect_out: usize) -> Result<ImageTensor> {
    if stage.in_channels() != input.channels() {
        return Err(Error::dim(name, format!("expects {} channels, got {}", stage.in_channels(), input.channels())));
    }
    if stage.out_channels() != expect_out {
        return Err(Error::dim(name, format!("emits {} channels, expected {expect_out}", stage.out_channels())));
    }
    let out = stage.run(&input.to_tensor::<f32>());
    let [_, c, h, w] = out.dims4();
    if (c, h, w) != (expect_out, input.height(), input.width()) {
        return Err(Error::dim(name, format!("output {c}x{h}x{w} does not match the input size")));
    }
    ImageTensor::from_tensor(&out, 0)
}

fn dehaze_exact(p: &Pipeline<'_>, x: &ImageTensor, keep: bool) -> Result<DehazeResult> {
    let spanned = span_channels(x)?;
    let cube = run_stage(p.gx, "G_x", &spanned, BANDS)?;
    let catalyst = run_stage(p.gr, "G_r", &cube, 3)?;
    let input = assemble_i2i_input(x, &catalyst)?;
    let dehazed = run_stage(p.gz, "G_z", &input, 3)?;
    let intermediates = keep.then_some(Intermediates { spanned, cube, catalyst });
    Ok(DehazeResult { dehazed, intermediates })
}

/// Full pipeline `G_z([multicue(x) | G_r(G_x(span(x)))])`. Inputs whose size is not a
/// multiple of the pipeline's requirement are reflect-padded and cropped back.
pub fn dehaze(p: &Pipeline<'_>, x_rgb: &ImageTensor, keep_intermediates: bool) -> Result<DehazeResult> {
    if x_rgb.channels() != 3 {
        return Err(Error::dim("dehaze", format!("expected RGB, got {} channels", x_rgb.channels())));
    }
    let m = p.multiple.max(1);
    let (h, w) = (x_rgb.height(), x_rgb.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return dehaze_exact(p, x_rgb, keep_intermediates);
    }
    let padded = x_rgb.pad_reflect(ph, pw)?;
    let r = dehaze_exact(p, &padded, keep_intermediates)?;
    let crop = |img: ImageTensor| img.crop(0, 0, h, w);
    Ok(DehazeResult {
        dehazed: crop(r.dehazed)?,
        intermediates: match r.intermediates {
            Some(i) => Some(Intermediates { spanned: crop(i.spanned)?, cube: crop(i.cube)?, catalyst: crop(i.catalyst)? }),
            None => None,
        },
    })
}
