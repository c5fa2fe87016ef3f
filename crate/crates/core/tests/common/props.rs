//! Row-stochasticity and permutation-equivariance probes for the attention
//! modules, shared by the property tests and the acceptance run.

use fpdanet::attention::{ChannelAttention, PositionAttention};
use fpdanet::nn::Pass;
use fpdanet::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_tensor, randomize, rng};

/// Reorder the flattened spatial positions: `out[.., p] = x[.., perm[p]]`.
pub fn permute_positions(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| {
        let src = perm[y * w + xx];
        x.at(b, ch, src / w, src % w)
    })
}

/// Reorder channels: `out[:, c] = x[:, perm[c]]`.
pub fn permute_channels(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |b, ch, y, xx| x.at(b, perm[ch], y, xx))
}

pub fn random_perm(len: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// Random shape `[n, c, h, w]` with `c` a multiple of 8.
pub fn random_shape(seed: u64) -> [usize; 4] {
    let mut r = rng(seed);
    [r.random_range(1..=2), 8 * r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6)]
}

pub struct Probe {
    /// Largest `|Σ_i S[j][i] − 1|` over all rows of all maps.
    pub row_sum_error: f64,
    /// Largest deviation of `f(πA)` from `π f(A)` for the position module.
    pub position_equivariance: f64,
    /// Same for the channel module with a channel permutation.
    pub channel_equivariance: f64,
}

/// Probe both modules on one random input, randomly initialised with
/// non-zero scales so the attention branch contributes.
pub fn probe(seed: u64) -> Probe {
    let shape = random_shape(seed);
    let [n, c, h, w] = shape;
    let mut pam = PositionAttention::<f64>::new(c, 8).unwrap();
    randomize(&mut pam, seed + 1);
    let mut cam = ChannelAttention::<f64>::new();
    randomize(&mut cam, seed + 2);
    // wide dynamic range stresses the max-shifted softmax
    let amp = [0.1, 1.0, 10.0][(seed % 3) as usize];
    let x = random_tensor(shape, seed + 3).scale(amp);

    let mut row_sum_error: f64 = 0.0;
    for item in 0..n {
        for sums in [pam.attention_map(&x, item).unwrap().row_sums(), cam.attention_map(&x, item).unwrap().row_sums()] {
            for s in sums {
                row_sum_error = row_sum_error.max((s - 1.0).abs());
            }
        }
    }

    let sp = random_perm(h * w, seed + 4);
    let lhs = pam.forward(&permute_positions(&x, &sp), &mut Pass::eval()).unwrap();
    let rhs = permute_positions(&pam.forward(&x, &mut Pass::eval()).unwrap(), &sp);
    let position_equivariance = lhs.max_abs_diff(&rhs);

    let cp = random_perm(c, seed + 5);
    let lhs = cam.forward(&permute_channels(&x, &cp), &mut Pass::eval()).unwrap();
    let rhs = permute_channels(&cam.forward(&x, &mut Pass::eval()).unwrap(), &cp);
    let channel_equivariance = lhs.max_abs_diff(&rhs);

    Probe { row_sum_error, position_equivariance, channel_equivariance }
}
