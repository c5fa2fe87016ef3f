use rand::Rng;

use crate::nn::Pass;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rectified linear unit.
pub struct Relu;

struct ReluCache<T> {
    output: Tensor<T>,
}

impl Relu {
    pub fn forward<T: Scalar>(x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        pass.record(|| ReluCache { output: y.clone() });
        y
    }

    pub fn backward<T: Scalar>(dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let ReluCache { output } = pass.take::<ReluCache<T>>();
        let mut dx = dy.clone();
        for (d, &o) in dx.data_mut().iter_mut().zip(output.data()) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }
        dx
    }
}

/// Max pooling with a 3×3 window, stride 2, padding 1.
pub struct MaxPool2d;

struct MaxPoolCache {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn out_size(h: usize) -> usize {
        (h + 2 * Self::PAD - Self::KERNEL) / Self::STRIDE + 1
    }

    pub fn forward<T: Scalar>(x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (Self::out_size(h), Self::out_size(w));
        let mut y = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let xd = x.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..Self::KERNEL {
                        let iy = (oy * Self::STRIDE + ky) as isize - Self::PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..Self::KERNEL {
                            let ix = (ox * Self::STRIDE + kx) as isize - Self::PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            // first maximum in scan order wins ties
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.data_mut()[(nc * ho + oy) * wo + ox] = best;
                    argmax.push(best_idx);
                }
            }
        }
        pass.record(|| MaxPoolCache { input_shape: x.shape(), argmax });
        y
    }

    pub fn backward<T: Scalar>(dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let MaxPoolCache { input_shape, argmax } = pass.take::<MaxPoolCache>();
        let mut dx = Tensor::zeros(input_shape);
        for (&idx, &d) in argmax.iter().zip(dy.data()) {
            dx.data_mut()[idx] += d;
        }
        dx
    }
}

/// Nearest-neighbour ×2 upsampling.
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        Tensor::from_fn([n, c, 2 * h, 2 * w], |b, ch, y, xx| x.at(b, ch, y / 2, xx / 2))
    }

    pub fn backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h2, w2] = dy.shape();
        let mut dx = Tensor::zeros([n, c, h2 / 2, w2 / 2]);
        let (h, w) = (h2 / 2, w2 / 2);
        for nc in 0..n * c {
            for y in 0..h2 {
                for x in 0..w2 {
                    dx.data_mut()[(nc * h + y / 2) * w + x / 2] += dy.data()[(nc * h2 + y) * w2 + x];
                }
            }
        }
        dx
    }
}

/// Spatial mean per channel: `[n, c, h, w] → [n, c, 1, 1]`.
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        let plane = x.plane();
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = x.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        Tensor::from_vec([n, c, 1, 1], data).unwrap()
    }

    pub fn backward<T: Scalar>(dy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
        let plane = input_shape[2] * input_shape[3];
        let inv = T::one() / T::from_usize(plane).unwrap();
        let mut dx = Tensor::zeros(input_shape);
        for (chunk, &d) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
            chunk.iter_mut().for_each(|v| *v = d * inv);
        }
        dx
    }
}

/// Inverted dropout; identity outside training or at `p == 0`.
pub struct Dropout;

struct DropoutCache<T> {
    mask: Vec<T>,
}

impl Dropout {
    pub fn forward<T: Scalar>(x: &Tensor<T>, p: f64, pass: &mut Pass) -> Tensor<T> {
        if !pass.is_training() || p <= 0.0 {
            pass.record(|| DropoutCache::<T> { mask: Vec::new() });
            return x.clone();
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.data().len())
            .map(|_| if pass.rng().random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        pass.record(|| DropoutCache { mask });
        y
    }

    pub fn backward<T: Scalar>(dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let DropoutCache { mask } = pass.take::<DropoutCache<T>>();
        if mask.is_empty() {
            return dy.clone();
        }
        let mut dx = dy.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        dx
    }
}

/// Concatenate along channels. All parts share batch and spatial size.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            assert_eq!([p.batch(), p.height(), p.width()], [n, h, w], "concat shape mismatch");
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor::from_vec([n, c, h, w], data).unwrap()
}

/// Inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    assert_eq!(widths.iter().sum::<usize>(), c);
    let plane = h * w;
    let mut out: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(n * wd * plane)).collect();
    for i in 0..n {
        let item = x.item(i);
        let mut off = 0;
        for (buf, &wd) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&item[off * plane..(off + wd) * plane]);
            off += wd;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::from_vec([n, wd, h, w], d).unwrap())
        .collect()
}
