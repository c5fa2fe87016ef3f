//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(self.beta1) && unit(self.beta2)) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("AdamW needs eps > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Moment estimates for every trainable leaf, in visiting order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable leaf from its accumulated gradient:
    /// `p ← p·(1 − lr·wd) − lr·m̂ / (√v̂ + eps)`.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let moments = &mut self.moments;
        let mut slot = 0;
        module.visit_mut("", &mut |_, p: &mut Param<T>| {
            if !p.is_trainable() {
                return;
            }
            if moments.len() <= slot {
                moments.push((vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            }
            let (m, v) = &mut moments[slot];
            slot += 1;
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p.value[i] = p.value[i] * decay - step_size * m[i] / denom;
            }
        });
    }
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, M: Module<T> + ?Sized>(module: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    module.visit("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        module.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}
