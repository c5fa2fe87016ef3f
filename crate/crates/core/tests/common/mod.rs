#![allow(dead_code)]

use fpdanet::nn::{initialize, Module, Param, Pass};
use fpdanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const PASS_SEED: u64 = 99;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.sample::<f64, _>(StandardNormal))
}

/// Initialize, then move every batch-norm affine pair and attention scale
/// away from its identity-like starting value so no gradient path is cut.
pub fn randomize<M: Module<f64> + ?Sized>(module: &mut M, seed: u64) {
    initialize(module, seed);
    let mut r = rng(seed ^ 0x5eed);
    module.visit_mut("", &mut |name, p| {
        if name.ends_with("bn.weight") {
            p.value.iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
        } else if name.ends_with("bn.bias") {
            p.value.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        } else if name.ends_with("alpha") || name.ends_with("beta") {
            p.value.iter_mut().for_each(|v| *v = r.random_range(0.3..0.8));
        } else if name.ends_with("running_var") {
            p.value.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
        } else if name.ends_with("running_mean") {
            p.value.iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
        }
    });
}

#[derive(Debug)]
pub struct Sample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Sample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-10 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn with_param<M: Module<f64> + ?Sized>(module: &mut M, target: &str, f: &mut dyn FnMut(&mut Param<f64>)) {
    module.visit_mut("", &mut |name, p| {
        if name == target {
            f(p)
        }
    });
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub type Forward<'a, M> = &'a dyn Fn(&M, &mut Pass) -> Vec<f64>;
pub type Backward<'a, M> = &'a dyn Fn(&mut M, &[f64], &mut Pass);

/// Compare analytic parameter gradients of `L = Σ w·forward(module)` (fixed
/// random `w`) against central differences at `count` scalars drawn
/// uniformly from all trainable parameters.
pub fn check_params<M: Module<f64>>(
    module: &mut M,
    forward: Forward<'_, M>,
    backward: Backward<'_, M>,
    count: usize,
    seed: u64,
    eps: f64,
) -> Vec<Sample> {
    let out = forward(module, &mut Pass::train(PASS_SEED));
    let mut r = rng(seed);
    let w: Vec<f64> = (0..out.len()).map(|_| r.sample(StandardNormal)).collect();

    module.zero_grad();
    let mut pass = Pass::train(PASS_SEED);
    forward(module, &mut pass);
    backward(module, &w, &mut pass);
    assert_eq!(pass.pending(), 0, "backward left entries on the tape");

    let mut leaves: Vec<(String, usize)> = Vec::new();
    module.visit("", &mut |name, p| {
        if p.is_trainable() {
            leaves.push((name.to_string(), p.len()));
        }
    });
    let total: usize = leaves.iter().map(|l| l.1).sum();
    let mut picks = rand::seq::index::sample(&mut r, total, count.min(total)).into_vec();
    picks.sort_unstable();

    let mut samples = Vec::new();
    for flat in picks {
        let mut off = flat;
        let (name, _) = leaves
            .iter()
            .find(|(_, len)| {
                if off < *len {
                    true
                } else {
                    off -= len;
                    false
                }
            })
            .unwrap()
            .clone();
        let mut analytic = 0.0;
        with_param(module, &name, &mut |p| analytic = p.grad[off]);
        with_param(module, &name, &mut |p| p.value[off] += eps);
        let plus = dot(&w, &forward(module, &mut Pass::train(PASS_SEED)));
        with_param(module, &name, &mut |p| p.value[off] -= 2.0 * eps);
        let minus = dot(&w, &forward(module, &mut Pass::train(PASS_SEED)));
        with_param(module, &name, &mut |p| p.value[off] += eps);
        samples.push(Sample { name, index: off, analytic, numeric: (plus - minus) / (2.0 * eps) });
    }
    samples
}

/// Input gradient at `count` random positions of `x`.
pub fn check_input<M>(
    module: &mut M,
    x: &Tensor<f64>,
    forward: &dyn Fn(&M, &Tensor<f64>, &mut Pass) -> Vec<f64>,
    backward: &dyn Fn(&mut M, &[f64], &mut Pass) -> Tensor<f64>,
    count: usize,
    seed: u64,
    eps: f64,
) -> Vec<Sample> {
    let out = forward(module, x, &mut Pass::train(PASS_SEED));
    let mut r = rng(seed);
    let w: Vec<f64> = (0..out.len()).map(|_| r.sample(StandardNormal)).collect();
    let mut pass = Pass::train(PASS_SEED);
    forward(module, x, &mut pass);
    let dx = backward(module, &w, &mut pass);
    let picks = rand::seq::index::sample(&mut r, x.data().len(), count.min(x.data().len())).into_vec();
    picks
        .into_iter()
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let plus = dot(&w, &forward(module, &xp, &mut Pass::train(PASS_SEED)));
            xp.data_mut()[i] -= 2.0 * eps;
            let minus = dot(&w, &forward(module, &xp, &mut Pass::train(PASS_SEED)));
            Sample { name: "input".into(), index: i, analytic: dx.data()[i], numeric: (plus - minus) / (2.0 * eps) }
        })
        .collect()
}

pub fn worst(samples: &[Sample]) -> f64 {
    samples.iter().map(Sample::rel_error).fold(0.0, f64::max)
}

pub fn report(label: &str, samples: &[Sample]) -> String {
    let w = samples.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error())).unwrap();
    format!(
        "{label}: {} samples, worst rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        samples.len(),
        w.rel_error(),
        w.name,
        w.index,
        w.analytic,
        w.numeric
    )
}

pub mod gradcases;
pub mod metrics_oracle;
pub mod props;

/// Default schedule bounds written out branch by branch: the scaled rates
/// clamped into `[1e-4, 1e-3]` and `[1e-6, 1e-5]`.
pub fn lr_bounds_oracle(batch_size: usize) -> (f64, f64) {
    let b = batch_size as f64;
    let mut hi = b / 64.0 * 0.01;
    if hi < 1e-4 {
        hi = 1e-4;
    }
    if hi > 1e-3 {
        hi = 1e-3;
    }
    let mut lo = b / 64.0 * 1e-4;
    if lo < 1e-6 {
        lo = 1e-6;
    }
    if lo > 1e-5 {
        lo = 1e-5;
    }
    (hi, lo)
}

/// Rate at `epoch`: ×0.1 from epoch 120 and again from 170, never below
/// the lower bound.
pub fn lr_oracle(batch_size: usize, epoch: usize) -> f64 {
    let (hi, lo) = lr_bounds_oracle(batch_size);
    let mut lr = hi;
    if epoch >= 120 {
        lr *= 0.1;
    }
    if epoch >= 170 {
        lr *= 0.1;
    }
    if lr < lo {
        lo
    } else {
        lr
    }
}
