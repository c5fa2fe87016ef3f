//! Dual attention: a position branch and a channel branch run in parallel.
//!
//! For a feature map `A` flattened to `C × N` (`N = H·W`):
//!
//! * position: `S = softmax_i(B_i · C_j)` over source positions `i`, with
//!   `B`, `C` 1×1 projections to `C/r` channels, then
//!   `E_j = α Σ_i S_ji D_i + A_j` where `D` is a 1×1 projection to `C` channels;
//! * channel: `X = softmax_i(A_i · A_j)` over source channels `i`, then
//!   `E_j = β Σ_i X_ji A_i + A_j`.
//!
//! Both scales start at exactly zero, so each branch (and their fusion) is the
//! identity map at initialization.

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::nn::{scoped, Conv2d, Init, Module, Param, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default query/key channel reduction.
pub const DEFAULT_REDUCTION: usize = 8;

/// Row-stochastic attention matrix; entry `(j, i)` weights source `i` for target `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    size: usize,
    values: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, target: usize, source: usize) -> T {
        self.values[target * self.size + source]
    }

    pub fn row(&self, target: usize) -> &[T] {
        &self.values[target * self.size..(target + 1) * self.size]
    }

    pub fn row_sums(&self) -> Vec<T> {
        self.values.chunks(self.size).map(|r| r.iter().copied().sum()).collect()
    }
}

/// In-place max-shifted softmax over each row of a `rows × cols` matrix.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Gradient through a row softmax: `dE = S ⊙ (dS − Σ_row dS⊙S)`.
fn softmax_rows_backward<T: Scalar>(s: &[T], ds: &[T], cols: usize) -> Vec<T> {
    let mut de = vec![T::zero(); s.len()];
    for ((sr, dsr), der) in s.chunks(cols).zip(ds.chunks(cols)).zip(de.chunks_mut(cols)) {
        let dot: T = sr.iter().zip(dsr).map(|(&a, &b)| a * b).sum();
        for ((d, &sv), &dsv) in der.iter_mut().zip(sr).zip(dsr) {
            *d = sv * (dsv - dot);
        }
    }
    de
}

fn check_channels<T: Scalar>(a: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if a.channels() != channels {
        return Err(Error::Shape(format!("{what} expects {channels} channels, got {}", a.channels())));
    }
    if a.plane() == 0 {
        return Err(Error::Shape(format!("{what} needs at least one spatial position")));
    }
    Ok(())
}

/// Spatial self-attention with query/key/value 1×1 projections and scale `alpha`.
#[derive(Clone, Debug)]
pub struct PositionAttention<T> {
    pub proj_b: Conv2d<T>,
    pub proj_c: Conv2d<T>,
    pub proj_d: Conv2d<T>,
    pub alpha: Param<T>,
    channels: usize,
}

struct PositionCache<T> {
    b: Tensor<T>,
    c: Tensor<T>,
    d: Tensor<T>,
    s: Vec<T>,
    m: Tensor<T>,
}

impl<T: Scalar> PositionAttention<T> {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::Config("attention channels and reduction must be positive".into()));
        }
        let reduced = channels / reduction;
        if reduced == 0 {
            return Err(Error::Config(format!(
                "position attention reduction {reduction} leaves no query/key channels for {channels} input channels"
            )));
        }
        Ok(PositionAttention {
            proj_b: Conv2d::new(channels, reduced, 1, 1, true),
            proj_c: Conv2d::new(channels, reduced, 1, 1, true),
            proj_d: Conv2d::new(channels, channels, 1, 1, true),
            alpha: Param::new(&[1], Init::Constant(0.0)),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduced_channels(&self) -> usize {
        self.proj_b.out_channels()
    }

    fn scores(b: &[T], c: &[T], k: usize, n: usize) -> Vec<T> {
        // energy[j][i] = C_j · B_i
        let mut s = vec![T::zero(); n * n];
        gemm(T::one(), MatRef::new(c, k, n).t(), MatRef::new(b, k, n), T::zero(), MatMut::new(&mut s, n, n));
        softmax_rows(&mut s, n);
        s
    }

    /// Attention matrix `S` (N×N) of batch item `item`.
    pub fn attention_map(&self, a: &Tensor<T>, item: usize) -> Result<AttentionMap<T>> {
        check_channels(a, self.channels, "position attention")?;
        let x = a.select(item);
        let mut pass = Pass::eval();
        let b = self.proj_b.forward(&x, &mut pass);
        let c = self.proj_c.forward(&x, &mut pass);
        let n = a.plane();
        Ok(AttentionMap { size: n, values: Self::scores(b.data(), c.data(), self.reduced_channels(), n) })
    }

    /// `E = α · D Sᵀ + A`.
    pub fn forward(&self, a: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        check_channels(a, self.channels, "position attention")?;
        let [batch, ch, _, _] = a.shape();
        let n = a.plane();
        let k = self.reduced_channels();
        let b = self.proj_b.forward(a, pass);
        let c = self.proj_c.forward(a, pass);
        let d = self.proj_d.forward(a, pass);
        let alpha = self.alpha.value[0];
        let mut m = Tensor::zeros(a.shape());
        let mut s_all = Vec::with_capacity(if pass.is_training() { batch * n * n } else { 0 });
        for i in 0..batch {
            let s = Self::scores(b.item(i), c.item(i), k, n);
            gemm(
                T::one(),
                MatRef::new(d.item(i), ch, n),
                MatRef::new(&s, n, n).t(),
                T::zero(),
                MatMut::new(m.item_mut(i), ch, n),
            );
            if pass.is_training() {
                s_all.extend_from_slice(&s);
            }
        }
        let mut out = a.clone();
        for (o, &mv) in out.data_mut().iter_mut().zip(m.data()) {
            *o = alpha * mv + *o;
        }
        pass.record(|| PositionCache { b, c, d, s: s_all, m });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let PositionCache { b, c, d, s, m } = pass.take::<PositionCache<T>>();
        let [batch, ch, _, _] = g.shape();
        let n = g.plane();
        let k = self.reduced_channels();
        let alpha = self.alpha.value[0];

        self.alpha.grad[0] += g.data().iter().zip(m.data()).map(|(&x, &y)| x * y).sum::<T>();

        let dm = g.scale(alpha);
        let mut db = Tensor::zeros(b.shape());
        let mut dc = Tensor::zeros(c.shape());
        let mut dd = Tensor::zeros(d.shape());
        let mut ds = vec![T::zero(); n * n];
        for i in 0..batch {
            let si = &s[i * n * n..(i + 1) * n * n];
            let dmi = MatRef::new(dm.item(i), ch, n);
            // dD = dM · S
            gemm(T::one(), dmi, MatRef::new(si, n, n), T::zero(), MatMut::new(dd.item_mut(i), ch, n));
            // dS = dMᵀ · D
            gemm(T::one(), dmi.t(), MatRef::new(d.item(i), ch, n), T::zero(), MatMut::new(&mut ds, n, n));
            let de = softmax_rows_backward(si, &ds, n);
            // dC = B · dEᵀ, dB = C · dE
            gemm(
                T::one(),
                MatRef::new(b.item(i), k, n),
                MatRef::new(&de, n, n).t(),
                T::zero(),
                MatMut::new(dc.item_mut(i), k, n),
            );
            gemm(
                T::one(),
                MatRef::new(c.item(i), k, n),
                MatRef::new(&de, n, n),
                T::zero(),
                MatMut::new(db.item_mut(i), k, n),
            );
        }
        let mut da = g.clone();
        da.add_assign(&self.proj_d.backward(&dd, pass));
        da.add_assign(&self.proj_c.backward(&dc, pass));
        da.add_assign(&self.proj_b.backward(&db, pass));
        da
    }
}

impl<T: Scalar> Module<T> for PositionAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj_b.visit(&scoped(prefix, "proj_b"), f);
        self.proj_c.visit(&scoped(prefix, "proj_c"), f);
        self.proj_d.visit(&scoped(prefix, "proj_d"), f);
        f(&scoped(prefix, "alpha"), &self.alpha);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj_b.visit_mut(&scoped(prefix, "proj_b"), f);
        self.proj_c.visit_mut(&scoped(prefix, "proj_c"), f);
        self.proj_d.visit_mut(&scoped(prefix, "proj_d"), f);
        f(&scoped(prefix, "alpha"), &mut self.alpha);
    }
}

/// Channel self-attention over the raw Gram matrix, scale `beta`.
#[derive(Clone, Debug)]
pub struct ChannelAttention<T> {
    pub beta: Param<T>,
}

struct ChannelCache<T> {
    a: Tensor<T>,
    x: Vec<T>,
    m: Tensor<T>,
}

impl<T: Scalar> Default for ChannelAttention<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new() -> Self {
        ChannelAttention { beta: Param::new(&[1], Init::Constant(0.0)) }
    }

    fn weights(a: &[T], ch: usize, n: usize) -> Vec<T> {
        let am = MatRef::new(a, ch, n);
        let mut x = vec![T::zero(); ch * ch];
        gemm(T::one(), am, am.t(), T::zero(), MatMut::new(&mut x, ch, ch));
        softmax_rows(&mut x, ch);
        x
    }

    /// Attention matrix `X` (C×C) of batch item `item`.
    pub fn attention_map(&self, a: &Tensor<T>, item: usize) -> Result<AttentionMap<T>> {
        check_channels(a, a.channels(), "channel attention")?;
        let ch = a.channels();
        Ok(AttentionMap { size: ch, values: Self::weights(a.item(item), ch, a.plane()) })
    }

    /// `E = β · X A + A`.
    pub fn forward(&self, a: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        if a.channels() == 0 {
            return Err(Error::Shape("channel attention needs at least one channel".into()));
        }
        check_channels(a, a.channels(), "channel attention")?;
        let [batch, ch, _, _] = a.shape();
        let n = a.plane();
        let beta = self.beta.value[0];
        let mut m = Tensor::zeros(a.shape());
        let mut x_all = Vec::with_capacity(if pass.is_training() { batch * ch * ch } else { 0 });
        for i in 0..batch {
            let x = Self::weights(a.item(i), ch, n);
            gemm(
                T::one(),
                MatRef::new(&x, ch, ch),
                MatRef::new(a.item(i), ch, n),
                T::zero(),
                MatMut::new(m.item_mut(i), ch, n),
            );
            if pass.is_training() {
                x_all.extend_from_slice(&x);
            }
        }
        let mut out = a.clone();
        for (o, &mv) in out.data_mut().iter_mut().zip(m.data()) {
            *o = beta * mv + *o;
        }
        pass.record(|| ChannelCache { a: a.clone(), x: x_all, m });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let ChannelCache { a, x, m } = pass.take::<ChannelCache<T>>();
        let [batch, ch, _, _] = a.shape();
        let n = a.plane();
        let beta = self.beta.value[0];
        self.beta.grad[0] += g.data().iter().zip(m.data()).map(|(&p, &q)| p * q).sum::<T>();

        let mut da = g.clone();
        let mut dx = vec![T::zero(); ch * ch];
        for i in 0..batch {
            let xi = &x[i * ch * ch..(i + 1) * ch * ch];
            let ai = MatRef::new(a.item(i), ch, n);
            let dm: Vec<T> = g.item(i).iter().map(|&v| v * beta).collect();
            let dmm = MatRef::new(&dm, ch, n);
            // dX = dM · Aᵀ
            gemm(T::one(), dmm, ai.t(), T::zero(), MatMut::new(&mut dx, ch, ch));
            let dgram = softmax_rows_backward(xi, &dx, ch);
            let mut sym = dgram.clone();
            for r in 0..ch {
                for col in 0..ch {
                    sym[r * ch + col] += dgram[col * ch + r];
                }
            }
            let dai = da.item_mut(i);
            // dA += Xᵀ · dM + (dG + dGᵀ) · A
            gemm(T::one(), MatRef::new(xi, ch, ch).t(), dmm, T::one(), MatMut::new(dai, ch, n));
            gemm(T::one(), MatRef::new(&sym, ch, ch), ai, T::one(), MatMut::new(dai, ch, n));
        }
        da
    }
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "beta"), &mut self.beta);
    }
}

/// Parallel position + channel attention, fused as `PAM(a) + CAM(a) − a`.
#[derive(Clone, Debug)]
pub struct DualAttention<T> {
    pub position: PositionAttention<T>,
    pub channel: ChannelAttention<T>,
}

impl<T: Scalar> DualAttention<T> {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        Ok(DualAttention { position: PositionAttention::new(channels, reduction)?, channel: ChannelAttention::new() })
    }

    pub fn channels(&self) -> usize {
        self.position.channels()
    }

    pub fn forward(&self, a: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        let p = self.position.forward(a, pass)?;
        let c = self.channel.forward(a, pass)?;
        Ok(p.add(&c).sub(a))
    }

    pub fn backward(&mut self, g: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let dc = self.channel.backward(g, pass);
        let dp = self.position.backward(g, pass);
        dp.add(&dc).sub(g)
    }
}

impl<T: Scalar> Module<T> for DualAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.position.visit(prefix, f);
        self.channel.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.position.visit_mut(prefix, f);
        self.channel.visit_mut(prefix, f);
    }
}
