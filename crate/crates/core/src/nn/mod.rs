//! Layer primitives with hand-written reverse passes.
//!
//! A forward call in training mode records whatever its backward call needs
//! on the [`Pass`] tape; backward calls pop those records in reverse order, so
//! a composite layer must call its children's backward methods in exactly the
//! reverse of the order it called their forward methods.

mod conv;
mod linear;
mod norm;
mod ops;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use ops::{concat_channels, split_channels, Dropout, GlobalAvgPool, MaxPool2d, Relu, Upsample2x};

use std::any::Any;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// How a parameter is filled by [`initialize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// Normal with the given standard deviation.
    Normal { std: f64 },
    Constant(f64),
}

/// A named leaf of the parameter tree.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    /// Accumulated gradient. Empty for buffers.
    pub grad: Vec<T>,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: &[usize], init: Init) -> Self {
        let len = shape.iter().product();
        Param { value: vec![T::zero(); len], grad: vec![T::zero(); len], shape: shape.to_vec(), init, trainable: true }
    }

    /// Non-trainable state (e.g. running statistics) saved with the model.
    pub fn buffer(shape: &[usize], init: Init) -> Self {
        let len = shape.iter().product();
        Param { value: vec![T::zero(); len], grad: Vec::new(), shape: shape.to_vec(), init, trainable: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn init_rule(&self) -> Init {
        self.init
    }

    pub fn set_init(&mut self, init: Init) {
        self.init = init;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn fill(&mut self, v: T) {
        self.value.iter_mut().for_each(|x| *x = v);
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                total += p.len();
            }
        });
        total
    }

    /// Names of every leaf (parameters and buffers) in visiting order.
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }
}

/// `prefix.name`, or just `name` at the root.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fill every leaf from its [`Init`] rule.
///
/// Each leaf draws from its own ChaCha stream keyed by `(seed, name)`, so a
/// layer's initial values do not depend on which other layers exist.
pub fn initialize<T: Scalar, M: Module<T> + ?Sized>(module: &mut M, seed: u64) {
    module.visit_mut("", &mut |name, p| {
        match p.init {
            Init::Constant(v) => p.fill(T::from_f64_lossy(v)),
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                fill_normal(p, seed, name, std);
            }
            Init::Normal { std } => fill_normal(p, seed, name, std),
        }
        p.zero_grad();
    });
}

fn fill_normal<T: Scalar>(p: &mut Param<T>, seed: u64, name: &str, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    for v in p.value.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = T::from_f64_lossy(z * std);
    }
}

/// Mode and tape for one forward/backward sweep.
pub struct Pass {
    training: bool,
    tape: Vec<Box<dyn Any + Send>>,
    rng: ChaCha8Rng,
}

impl Pass {
    /// Inference: batch-norm uses running statistics, dropout is off, nothing is recorded.
    pub fn eval() -> Self {
        Pass { training: false, tape: Vec::new(), rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training: batch statistics, dropout masks drawn from `seed`, caches recorded.
    pub fn train(seed: u64) -> Self {
        Pass { training: true, tape: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Push a cache built by `make`; skipped outside training.
    pub(crate) fn record<C: Any + Send>(&mut self, make: impl FnOnce() -> C) {
        if self.training {
            self.tape.push(Box::new(make()));
        }
    }

    pub(crate) fn take<C: Any>(&mut self) -> C {
        let entry = self.tape.pop().expect("backward called with an empty tape");
        *entry.downcast::<C>().unwrap_or_else(|_| {
            panic!("tape out of order: expected {}", std::any::type_name::<C>())
        })
    }

    /// Entries still on the tape; zero after a complete backward sweep.
    pub fn pending(&self) -> usize {
        self.tape.len()
    }
}
