//! Gradient-check cases for every training loss: depth-1, width-4 networks on 8x8
//! inputs at f64.

use skygan::h2h::{
    classifier_bce, critic_objective, cycle_loss_graph, generator_objective, identity_loss_graph, BoundH2H,
    H2HBatch, H2HBundle, H2HSpec, H2HWeights,
};
use skygan::hsc::{hsc_loss_graph, CatalystNet, CatalystSpec};
use skygan::i2i::{discriminator_loss_graph, generator_loss_graph, I2IBundle, I2ISpec, I2I_CHANNELS};
use skygan::image::{batch_tensor, ImageTensor};
use skygan::spectral::make_spectral_fixtures;
use skygan_nn::{Graph, Module, ParamSet, Tensor, Var};

use super::gradcheck::{check, CheckStats};
use super::random_image;

pub const TOL: f64 = 1e-3;
pub const PROBES: usize = 12;

pub type Case = (&'static str, fn() -> CheckStats);

/// Every case with its name, for suites that run them all.
pub const ALL: [Case; 8] = [
    ("cycle", cycle_loss_gradients),
    ("identity", identity_loss_gradients),
    ("adversarial (critics)", critic_objective_gradients),
    ("adversarial (generators)", generator_objective_gradients),
    ("domain classifier", domain_classifier_gradients),
    ("catalyst L_r", catalyst_loss_gradients),
    ("i2i discriminator", i2i_discriminator_gradients),
    ("i2i generator", i2i_generator_gradients),
];

fn tiny_h2h() -> H2HSpec {
    H2HSpec { depth: 1, base_width: 4, disc_layers: 1, disc_width: 4, classifier_width: 4 }
}

fn shifted(img: ImageTensor, lo: f32, hi: f32) -> ImageTensor {
    let (h, w, c) = img.dims();
    ImageTensor::new(h, w, c, img.data().iter().map(|v| lo + (hi - lo) * v).collect()).unwrap()
}

/// `separation` pushes the hazy inputs bright and the clean ones dark so the two
/// domains differ clearly.
fn batch(separation: f32) -> H2HBatch<f64> {
    let hazy = [1, 2].map(|s| shifted(random_image(8, 8, 3, s), separation, 1.0));
    let clean = [3, 4].map(|s| shifted(random_image(8, 8, 3, s), 0.0, 1.0 - separation));
    let cubes = make_spectral_fixtures(2, 8, 8, 5).unwrap();
    H2HBatch::from_images(
        &hazy.iter().collect::<Vec<_>>(),
        &clean.iter().collect::<Vec<_>>(),
        &cubes.iter().map(|f| &f.cube).collect::<Vec<_>>(),
    )
    .unwrap()
}

#[derive(Clone)]
struct H2HCase {
    b: H2HBundle<f64>,
    batch: H2HBatch<f64>,
}

impl H2HCase {
    fn new() -> Self {
        Self::separated(0.0)
    }

    fn separated(separation: f32) -> Self {
        H2HCase { b: H2HBundle::new(tiny_h2h(), H2HWeights::default(), 17), batch: batch(separation) }
    }

    fn inputs(&self, g: &mut Graph<f64>) -> (Var, Var, Var) {
        (
            g.constant(self.batch.x_spanned.clone()),
            g.constant(self.batch.y_clean.clone()),
            g.constant(self.batch.h.clone()),
        )
    }
}

fn generators(c: &mut H2HCase) -> Vec<&mut ParamSet<f64>> {
    vec![c.b.gx.params_mut(), c.b.gh.params_mut()]
}

fn critics(c: &mut H2HCase) -> Vec<&mut ParamSet<f64>> {
    vec![c.b.dx.params_mut(), c.b.dh.params_mut(), c.b.cls.params_mut()]
}

fn gx_and_classifier(c: &mut H2HCase) -> Vec<&mut ParamSet<f64>> {
    vec![c.b.gx.params_mut(), c.b.cls.params_mut()]
}

pub fn cycle_loss_gradients() -> CheckStats {
    check(
        &H2HCase::new(),
        generators,
        &|c, g, p| {
            let (x, y, h) = c.inputs(g);
            cycle_loss_graph(g, &c.b.gx, &p[0], &c.b.gh, &p[1], x, y, h).unwrap().0
        },
        PROBES,
        1,
    )
}

pub fn identity_loss_gradients() -> CheckStats {
    check(
        &H2HCase::new(),
        generators,
        &|c, g, p| {
            let (x, _, h) = c.inputs(g);
            identity_loss_graph(g, &c.b.gx, &p[0], &c.b.gh, &p[1], x, h)
        },
        PROBES,
        2,
    )
}

pub fn critic_objective_gradients() -> CheckStats {
    check(
        &H2HCase::new(),
        critics,
        &|c, g, p| {
            let bound = BoundH2H {
                gx: c.b.gx.params().bind(g, false),
                gh: c.b.gh.params().bind(g, false),
                dx: p[0].clone(),
                dh: p[1].clone(),
                cls: p[2].clone(),
            };
            let (x, y, h) = c.inputs(g);
            critic_objective(g, &c.b, &bound, x, y, h).0
        },
        PROBES,
        3,
    )
}

pub fn generator_objective_gradients() -> CheckStats {
    check(
        &H2HCase::new(),
        generators,
        &|c, g, p| {
            let bound = BoundH2H {
                gx: p[0].clone(),
                gh: p[1].clone(),
                dx: c.b.dx.params().bind(g, false),
                dh: c.b.dh.params().bind(g, false),
                cls: c.b.cls.params().bind(g, false),
            };
            let (x, y, h) = c.inputs(g);
            generator_objective(g, &c.b, &bound, x, y, h).unwrap().0
        },
        PROBES,
        4,
    )
}

pub fn domain_classifier_gradients() -> CheckStats {
    check(
        &H2HCase::separated(0.7),
        gx_and_classifier,
        &|c, g, p| {
            let (x, y, _) = c.inputs(g);
            let hazy = c.b.gx.forward(g, &p[0], x);
            let y_spanned = skygan::color::span_var(g, y);
            let clear = c.b.gx.forward(g, &p[0], y_spanned);
            let lh = c.b.cls.forward(g, &p[1], hazy);
            let lc = c.b.cls.forward(g, &p[1], clear);
            classifier_bce(g, lh, lc)
        },
        // Instance norm cancels most of the domain gap, so many coordinates have
        // negligible gradient; sample more of them.
        4 * PROBES,
        5,
    )
}

#[derive(Clone)]
struct HscCase {
    net: CatalystNet<f64>,
    cube: Tensor<f64>,
    y: Tensor<f64>,
}

fn catalyst_params(c: &mut HscCase) -> Vec<&mut ParamSet<f64>> {
    vec![c.net.net.params_mut()]
}

pub fn catalyst_loss_gradients() -> CheckStats {
    let cubes = make_spectral_fixtures(2, 8, 8, 6).unwrap();
    let case = HscCase {
        net: CatalystNet::new(CatalystSpec { residual_blocks: 1, width: 4 }, 8),
        cube: batch_tensor(&cubes.iter().map(|f| &f.cube).collect::<Vec<_>>()).unwrap(),
        y: batch_tensor(&[&random_image(8, 8, 3, 7), &random_image(8, 8, 3, 8)]).unwrap(),
    };
    check(
        &case,
        catalyst_params,
        &|c, g, p| {
            let cube = g.constant(c.cube.clone());
            let y = g.constant(c.y.clone());
            hsc_loss_graph(g, &c.net, &p[0], cube, y)
        },
        PROBES,
        9,
    )
}

#[derive(Clone)]
struct I2ICase {
    b: I2IBundle<f64>,
    input: Tensor<f64>,
    y: Tensor<f64>,
}

impl I2ICase {
    fn new() -> Self {
        let spec = I2ISpec { depth: 1, base_width: 4, disc_layers: 1, disc_width: 4 };
        let inputs: Vec<ImageTensor> = (0..2).map(|i| random_image(8, 8, I2I_CHANNELS, 20 + i)).collect();
        I2ICase {
            b: I2IBundle::new(spec, 100.0, 10),
            input: batch_tensor(&inputs.iter().collect::<Vec<_>>()).unwrap(),
            y: batch_tensor(&[&random_image(8, 8, 3, 30), &random_image(8, 8, 3, 31)]).unwrap(),
        }
    }
}

fn i2i_discriminator(c: &mut I2ICase) -> Vec<&mut ParamSet<f64>> {
    vec![c.b.dz.params_mut()]
}

fn i2i_generator(c: &mut I2ICase) -> Vec<&mut ParamSet<f64>> {
    vec![c.b.gz.params_mut()]
}

pub fn i2i_discriminator_gradients() -> CheckStats {
    check(
        &I2ICase::new(),
        i2i_discriminator,
        &|c, g, p| {
            let pz = c.b.gz.params().bind(g, false);
            let x = g.constant(c.input.clone());
            let y = g.constant(c.y.clone());
            let fake = c.b.gz.forward(g, &pz, x);
            let real_pair = g.concat(&[x, y]);
            let fake_pair = g.concat(&[x, fake]);
            let rl = c.b.dz.forward(g, &p[0], real_pair);
            let fl = c.b.dz.forward(g, &p[0], fake_pair);
            discriminator_loss_graph(g, rl, fl)
        },
        PROBES,
        11,
    )
}

pub fn i2i_generator_gradients() -> CheckStats {
    check(
        &I2ICase::new(),
        i2i_generator,
        &|c, g, p| {
            let pd = c.b.dz.params().bind(g, false);
            let x = g.constant(c.input.clone());
            let y = g.constant(c.y.clone());
            let fake = c.b.gz.forward(g, &p[0], x);
            let fake_pair = g.concat(&[x, fake]);
            let fl = c.b.dz.forward(g, &pd, fake_pair);
            generator_loss_graph(g, fake, y, fl, c.b.lambda_l1).0
        },
        PROBES,
        12,
    )
}
