use crate::nn::{scoped, Init, Module, Param, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization.
///
/// Training mode normalizes with batch statistics. The running averages are
/// folded in during `backward`, which is where a training step commits its
/// state; a forward-only training pass leaves them untouched.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    channels: usize,
}

struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(&[channels], Init::Constant(1.0)),
            beta: Param::new(&[channels], Init::Constant(0.0)),
            running_mean: Param::buffer(&[channels], Init::Constant(0.0)),
            running_var: Param::buffer(&[channels], Init::Constant(1.0)),
            channels,
        }
    }

    /// Same layer with its scale initialized to zero.
    pub fn zero_scaled(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        bn.gamma.set_init(Init::Constant(0.0));
        bn
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "batch norm over {} channels got {c}", self.channels);
        let plane = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let mut y = Tensor::zeros(x.shape());

        if !pass.is_training() {
            for ch in 0..c {
                let inv = T::one() / (self.running_var.value[ch] + eps).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    for (o, &v) in y.data_mut()[off..off + plane].iter_mut().zip(&x.data()[off..off + plane]) {
                        *o = v * scale + shift;
                    }
                }
            }
            return y;
        }

        let count = n * plane;
        let m = T::from_usize(count).unwrap();
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                sum += x.data()[off..off + plane].iter().copied().sum::<T>();
            }
            let mean = sum / m;
            let mut sq = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for &v in &x.data()[off..off + plane] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let var = sq / m;
            let inv = T::one() / (var + eps).sqrt();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let xh = (x.data()[j] - mean) * inv;
                    xhat.data_mut()[j] = xh;
                    y.data_mut()[j] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
            inv_std[ch] = inv;
            means[ch] = mean;
            vars[ch] = if count > 1 { sq / T::from_usize(count - 1).unwrap() } else { var };
        }
        pass.record(|| BnCache { xhat, inv_std, mean: means, var_unbiased: vars });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let BnCache { xhat, inv_std, mean, var_unbiased } = pass.take::<BnCache<T>>();
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let m = T::from_usize(n * plane).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    sum_dy += dy.data()[j];
                    sum_dy_xhat += dy.data()[j] * xhat.data()[j];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * inv_std[ch] / m;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    dx.data_mut()[j] = k * (m * dy.data()[j] - sum_dy - xhat.data()[j] * sum_dy_xhat);
                }
            }
        }

        let mom = T::from_f64_lossy(BN_MOMENTUM);
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - mom) * *rv + mom * var_unbiased[ch];
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "weight"), &self.gamma);
        f(&scoped(prefix, "bias"), &self.beta);
        f(&scoped(prefix, "running_mean"), &self.running_mean);
        f(&scoped(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.gamma);
        f(&scoped(prefix, "bias"), &mut self.beta);
        f(&scoped(prefix, "running_mean"), &mut self.running_mean);
        f(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}
