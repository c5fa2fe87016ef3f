use crate::linalg::{gemm, MatMut, MatRef};
use crate::nn::{scoped, Init, Module, Param, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D convolution with square kernels and symmetric zero padding.
///
/// Weight layout is `[out, in, k, k]`. Padding is `k / 2`, which gives
/// "same" output for stride 1 and `floor((h - 1) / 2) + 1` for stride 2.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::new(&[out_ch, in_ch, kernel, kernel], Init::HeNormal { fan_in }),
            bias: bias.then(|| Param::new(&[out_ch], Init::Constant(0.0))),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |x: usize| (x + 2 * self.pad - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Unfold one item (`C×H×W`) into `(C·k·k) × (Ho·Wo)` columns.
    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let plane = ho * wo;
        for c in 0..self.in_ch {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back onto an item, accumulating overlaps.
    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let plane = ho * wo;
        for c in 0..self.in_ch {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv expects {} input channels, got {c}", self.in_ch);
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_ch, ho, wo]);
        let wmat = MatRef::new(&self.weight.value, self.out_ch, kk);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
        for i in 0..n {
            let xi = x.item(i);
            let src = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            let yi = out.item_mut(i);
            gemm(T::one(), wmat, MatRef::new(src, kk, plane), T::zero(), MatMut::new(yi, self.out_ch, plane));
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.iter().enumerate() {
                    yi[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        pass.record(|| ConvCache { input: x.clone() });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let ConvCache { input } = pass.take::<ConvCache<T>>();
        let [n, _, h, w] = input.shape();
        let (ho, wo) = self.out_size(h, w);
        let plane = ho * wo;
        let kk = self.in_ch * self.kernel * self.kernel;
        assert_eq!(dy.shape(), [n, self.out_ch, ho, wo], "conv backward shape");
        let mut dx = Tensor::zeros(input.shape());
        let mut cols = vec![T::zero(); kk * plane];
        let mut dcols = vec![T::zero(); kk * plane];
        for i in 0..n {
            let dyi = MatRef::new(dy.item(i), self.out_ch, plane);
            let src: &[T] = if self.is_pointwise() {
                input.item(i)
            } else {
                self.im2col(input.item(i), h, w, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(
                T::one(),
                dyi,
                MatRef::new(src, kk, plane).t(),
                T::one(),
                MatMut::new(&mut self.weight.grad, self.out_ch, kk),
            );
            if let Some(b) = &mut self.bias {
                for (o, g) in b.grad.iter_mut().enumerate() {
                    *g += dy.item(i)[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
                }
            }
            let wmat = MatRef::new(&self.weight.value, self.out_ch, kk);
            if self.is_pointwise() {
                gemm(T::one(), wmat.t(), dyi, T::zero(), MatMut::new(dx.item_mut(i), kk, plane));
            } else {
                gemm(T::one(), wmat.t(), dyi, T::zero(), MatMut::new(&mut dcols, kk, plane));
                self.col2im(&dcols, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&scoped(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&scoped(prefix, "bias"), b);
        }
    }
}
