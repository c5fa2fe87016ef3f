use crate::linalg::{gemm, MatMut, MatRef};
use crate::nn::{scoped, Init, Module, Param, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map over the channel axis of `[n, in, 1, 1]` tensors.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
}

struct LinearCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        let std = 1.0 / (in_features.max(1) as f64).sqrt();
        Linear {
            weight: Param::new(&[out_features, in_features], Init::Normal { std }),
            bias: Param::new(&[out_features], Init::Constant(0.0)),
            in_features,
            out_features,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear expects {} features", self.in_features);
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), n, self.in_features),
            MatRef::new(&self.weight.value, self.out_features, self.in_features).t(),
            T::one(),
            MatMut::new(y.data_mut(), n, self.out_features),
        );
        pass.record(|| LinearCache { input: x.clone() });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let LinearCache { input } = pass.take::<LinearCache<T>>();
        let n = input.batch();
        let dyv = MatRef::new(dy.data(), n, self.out_features);
        gemm(
            T::one(),
            dyv.t(),
            MatRef::new(input.data(), n, self.in_features),
            T::one(),
            MatMut::new(&mut self.weight.grad, self.out_features, self.in_features),
        );
        for i in 0..n {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.item(i)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(input.shape());
        gemm(
            T::one(),
            dyv,
            MatRef::new(&self.weight.value, self.out_features, self.in_features),
            T::zero(),
            MatMut::new(dx.data_mut(), n, self.in_features),
        );
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "weight"), &self.weight);
        f(&scoped(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}
