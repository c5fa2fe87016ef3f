//! Finite-difference checks of every differentiable building block, shared
//! by the gradient tests and the acceptance run. Each case returns the
//! sampled parameter (and, where meaningful, input) gradients.

use fpdanet::attention::{ChannelAttention, DualAttention, PositionAttention};
use fpdanet::backbone::{ConvBlock, IdentityBlock, StagePyramid};
use fpdanet::fpan::{ClassifierHead, Fpan, FusedLevels};
use fpdanet::nn::Pass;
use fpdanet::{Model, ModelConfig, Tensor};

use super::{check_input, check_params, random_tensor, randomize, Sample};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub type Case = (&'static str, fn() -> Vec<Sample>);

pub const CASES: [Case; 8] = [
    ("position attention", position_attention),
    ("channel attention", channel_attention),
    ("dual attention", dual_attention),
    ("conv block", conv_block),
    ("identity block", identity_block),
    ("fpan", fpan),
    ("classifier head", head),
    ("desk model", desk_model),
];

fn flat(levels: &FusedLevels<f64>) -> Vec<f64> {
    [&levels.l3, &levels.l4, &levels.l5].iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflat(like: &FusedLevels<f64>, d: &[f64]) -> FusedLevels<f64> {
    let n3 = like.l3.data().len();
    let n4 = like.l4.data().len();
    FusedLevels {
        l3: Tensor::from_vec(like.l3.shape(), d[..n3].to_vec()).unwrap(),
        l4: Tensor::from_vec(like.l4.shape(), d[n3..n3 + n4].to_vec()).unwrap(),
        l5: Tensor::from_vec(like.l5.shape(), d[n3 + n4..].to_vec()).unwrap(),
    }
}

fn grad_of(shape: [usize; 4], d: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, d.to_vec()).unwrap()
}

pub fn position_attention() -> Vec<Sample> {
    let mut m = PositionAttention::<f64>::new(16, 8).unwrap();
    randomize(&mut m, 1);
    let x = random_tensor([2, 16, 3, 4], 2);
    let shape = x.shape();
    let mut s = check_params(
        &mut m,
        &|m, p| m.forward(&x, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of(shape, d), p);
        },
        30,
        3,
        EPS,
    );
    s.extend(check_input(
        &mut m,
        &x,
        &|m, x, p| m.forward(x, p).unwrap().into_vec(),
        &|m, d, p| m.backward(&grad_of(shape, d), p),
        20,
        4,
        EPS,
    ));
    s
}

/// The module's only parameter is its scale, so most samples are input gradients.
pub fn channel_attention() -> Vec<Sample> {
    let mut m = ChannelAttention::<f64>::new();
    randomize(&mut m, 5);
    let x = random_tensor([2, 5, 3, 3], 6).scale(0.5);
    let shape = x.shape();
    let mut s = check_params(
        &mut m,
        &|m, p| m.forward(&x, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of(shape, d), p);
        },
        1,
        7,
        EPS,
    );
    s.extend(check_input(
        &mut m,
        &x,
        &|m, x, p| m.forward(x, p).unwrap().into_vec(),
        &|m, d, p| m.backward(&grad_of(shape, d), p),
        30,
        8,
        EPS,
    ));
    s
}

pub fn dual_attention() -> Vec<Sample> {
    let mut m = DualAttention::<f64>::new(8, 4).unwrap();
    randomize(&mut m, 9);
    let x = random_tensor([2, 8, 2, 3], 10).scale(0.5);
    let shape = x.shape();
    check_params(
        &mut m,
        &|m, p| m.forward(&x, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of(shape, d), p);
        },
        25,
        11,
        EPS,
    )
}

pub fn conv_block() -> Vec<Sample> {
    let mut m = ConvBlock::<f64>::new(6, 4, 12, 2);
    randomize(&mut m, 12);
    let x = random_tensor([3, 6, 6, 6], 13);
    let out = [3, 12, 3, 3];
    let mut s = check_params(
        &mut m,
        &|m, p| m.forward(&x, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of(out, d), p);
        },
        40,
        14,
        EPS,
    );
    s.extend(check_input(
        &mut m,
        &x,
        &|m, x, p| m.forward(x, p).unwrap().into_vec(),
        &|m, d, p| m.backward(&grad_of(out, d), p),
        20,
        15,
        EPS,
    ));
    s
}

pub fn identity_block() -> Vec<Sample> {
    let mut m = IdentityBlock::<f64>::new(8, 4);
    randomize(&mut m, 16);
    let x = random_tensor([3, 8, 4, 4], 17);
    let shape = x.shape();
    check_params(
        &mut m,
        &|m, p| m.forward(&x, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of(shape, d), p);
        },
        40,
        18,
        EPS,
    )
}

pub fn fpan() -> Vec<Sample> {
    let mut m = Fpan::<f64>::new([4, 6, 8], 5).unwrap();
    randomize(&mut m, 19);
    let pyr = StagePyramid {
        c3: random_tensor([2, 4, 8, 8], 20),
        c4: random_tensor([2, 6, 4, 4], 21),
        c5: random_tensor([2, 8, 2, 2], 22),
    };
    let like = m.forward(&pyr, &mut Pass::eval()).unwrap();
    check_params(
        &mut m,
        &|m, p| flat(&m.forward(&pyr, p).unwrap()),
        &|m, d, p| {
            m.backward(&unflat(&like, d), p);
        },
        40,
        23,
        EPS,
    )
}

pub fn head() -> Vec<Sample> {
    let mut m = ClassifierHead::<f64>::new(4, 5, 0.2);
    randomize(&mut m, 24);
    let levels = FusedLevels {
        l3: random_tensor([3, 4, 4, 4], 25),
        l4: random_tensor([3, 4, 2, 2], 26),
        l5: random_tensor([3, 4, 1, 1], 27),
    };
    check_params(
        &mut m,
        &|m, p| m.forward(&levels, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of([3, 5, 1, 1], d), p);
        },
        30,
        28,
        EPS,
    )
}

pub fn desk_model() -> Vec<Sample> {
    let mut m = Model::<f64>::uninitialized(&ModelConfig::desk()).unwrap();
    randomize(&mut m, 29);
    let x = random_tensor([2, 3, 64, 64], 30);
    check_params(
        &mut m,
        &|m, p| m.forward(&x, p).unwrap().into_vec(),
        &|m, d, p| {
            m.backward(&grad_of([2, 21, 1, 1], d), p);
        },
        40,
        31,
        EPS,
    )
}
