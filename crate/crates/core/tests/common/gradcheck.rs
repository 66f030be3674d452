//! Central finite-difference checks of tape gradients on small networks at f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skygan_nn::{Graph, ParamSet, Tensor, Var};

pub const EPS: f64 = 1e-6;

/// Builds a scalar loss on a fresh tape from the case and its bound parameter sets.
pub type Build<'a, B> = &'a dyn Fn(&B, &mut Graph<f64>, &[Vec<Var>]) -> Var;

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub max_rel: f64,
}

/// Compares analytic and numeric derivatives of `loss` with respect to `probes`
/// randomly chosen scalars in each parameter set.
///
/// `build` constructs the loss on a fresh tape from the bound parameter sets; the sets
/// are bound trainable in the order given by `sets`.
pub fn check<B: Clone>(
    base: &B,
    sets: fn(&mut B) -> Vec<&mut ParamSet<f64>>,
    build: Build<'_, B>,
    probes: usize,
    seed: u64,
) -> CheckStats {
    let mut b = base.clone();
    let (analytic, _) = eval(&mut b, sets, build, true);
    let analytic = analytic.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CheckStats::default();
    let layout: Vec<Vec<usize>> = sets(&mut b).iter().map(|s| s.tensors().iter().map(|t| t.len()).collect()).collect();
    for (si, lens) in layout.iter().enumerate() {
        let total: usize = lens.iter().sum();
        for flat in sample(&mut rng, total, probes.min(total)).into_iter() {
            let (ti, ei) = locate(lens, flat);
            let mut plus = base.clone();
            sets(&mut plus)[si].tensors_mut()[ti].data_mut()[ei] += EPS;
            let mut minus = base.clone();
            sets(&mut minus)[si].tensors_mut()[ti].data_mut()[ei] -= EPS;
            let lp = eval(&mut plus, sets, build, false).1;
            let lm = eval(&mut minus, sets, build, false).1;
            let numeric = (lp - lm) / (2.0 * EPS);
            let a = analytic[si][ti].data()[ei];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            stats.checked += 1;
            stats.max_rel = stats.max_rel.max((a - numeric).abs() / scale);
        }
    }
    stats
}

fn locate(lens: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &l) in lens.iter().enumerate() {
        if flat < l {
            return (i, flat);
        }
        flat -= l;
    }
    unreachable!()
}

fn eval<B>(
    b: &mut B,
    sets: fn(&mut B) -> Vec<&mut ParamSet<f64>>,
    build: Build<'_, B>,
    grads: bool,
) -> (Option<Vec<Vec<Tensor<f64>>>>, f64) {
    let mut g = Graph::new();
    let bound: Vec<Vec<Var>> = sets(b).iter().map(|s| s.bind(&mut g, true)).collect();
    let loss = build(b, &mut g, &bound);
    let value = g.value(loss).item();
    if !grads {
        return (None, value);
    }
    g.backward(loss);
    (Some(bound.iter().map(|vs| vs.iter().map(|&v| g.grad(v)).collect()).collect()), value)
}
