//! Residual bottleneck backbone.
//!
//! Group 1 is the stem (7×7 stride-2 convolution, batch norm, ReLU, 3×3
//! stride-2 max pool). Groups 2–5 each open with one [`ConvBlock`] followed by
//! `depth - 1` [`IdentityBlock`]s, at strides 4, 8, 16 and 32. Groups 3, 4 and
//! 5 form the [`StagePyramid`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scoped, BatchNorm2d, Conv2d, MaxPool2d, Module, Param, Pass, Relu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Total downsampling factor of the deepest group.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    /// Output channel count of groups 2–5.
    pub group_widths: [usize; 4],
    /// Blocks per group (one conv block plus `depth - 1` identity blocks).
    pub group_depths: [usize; 4],
    /// Ratio of a block's output width to its bottleneck width.
    pub expansion: usize,
}

impl BackboneConfig {
    pub fn full() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 64,
            group_widths: [256, 512, 1024, 2048],
            group_depths: [3, 4, 6, 3],
            expansion: 4,
        }
    }

    pub fn desk() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 16,
            group_widths: [32, 64, 128, 256],
            group_depths: [1, 1, 1, 1],
            expansion: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("input and stem channel counts must be positive".into()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("expansion must be at least 1".into()));
        }
        for (g, (&width, &depth)) in self.group_widths.iter().zip(&self.group_depths).enumerate() {
            if depth == 0 {
                return Err(Error::Config(format!("group{} depth must be at least 1", g + 2)));
            }
            if width == 0 || width % self.expansion != 0 {
                return Err(Error::Config(format!(
                    "group{} width {width} is not a positive multiple of expansion {}",
                    g + 2,
                    self.expansion
                )));
            }
        }
        Ok(())
    }

    /// Channel counts of c3, c4, c5.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        [self.group_widths[1], self.group_widths[2], self.group_widths[3]]
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvBn { conv: Conv2d::new(in_ch, out_ch, kernel, stride, false), bn: BatchNorm2d::new(out_ch), relu }
    }

    /// Variant whose batch-norm scale starts at zero, so the unit outputs zero at init.
    pub fn zero_init(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvBn { conv: Conv2d::new(in_ch, out_ch, kernel, stride, false), bn: BatchNorm2d::zero_scaled(out_ch), relu }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let y = self.conv.forward(x, pass);
        let y = self.bn.forward(&y, pass);
        if self.relu {
            Relu::forward(&y, pass)
        } else {
            y
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let d = if self.relu { Relu::backward(dy, pass) } else { dy.clone() };
        let d = self.bn.backward(&d, pass);
        self.conv.backward(&d, pass)
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(prefix, f);
        self.bn.visit(&scoped(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(prefix, f);
        self.bn.visit_mut(&scoped(prefix, "bn"), f);
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize, layer: &str) -> Result<()> {
    if x.channels() != channels {
        return Err(Error::Shape(format!(
            "{layer} expects {channels} input channels, got {}",
            x.channels()
        )));
    }
    Ok(())
}

/// Bottleneck block with a projection shortcut.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub reduce_1x1: ConvBn<T>,
    pub conv_3x3: ConvBn<T>,
    pub expand_1x1: ConvBn<T>,
    pub shortcut_1x1: ConvBn<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(in_ch: usize, mid: usize, out_ch: usize, stride: usize) -> Self {
        ConvBlock {
            reduce_1x1: ConvBn::new(in_ch, mid, 1, 1, true),
            conv_3x3: ConvBn::new(mid, mid, 3, stride, true),
            expand_1x1: ConvBn::zero_init(mid, out_ch, 1, 1, false),
            shortcut_1x1: ConvBn::new(in_ch, out_ch, 1, stride, false),
        }
    }

    /// Assemble from explicit layers, checking that the branches line up.
    pub fn from_layers(
        reduce_1x1: ConvBn<T>,
        conv_3x3: ConvBn<T>,
        expand_1x1: ConvBn<T>,
        shortcut_1x1: ConvBn<T>,
    ) -> Result<Self> {
        if conv_3x3.in_channels() != reduce_1x1.out_channels() {
            return Err(Error::Config(format!(
                "conv_3x3 takes {} channels but reduce_1x1 produces {}",
                conv_3x3.in_channels(),
                reduce_1x1.out_channels()
            )));
        }
        if expand_1x1.in_channels() != conv_3x3.out_channels() {
            return Err(Error::Config(format!(
                "expand_1x1 takes {} channels but conv_3x3 produces {}",
                expand_1x1.in_channels(),
                conv_3x3.out_channels()
            )));
        }
        if shortcut_1x1.in_channels() != reduce_1x1.in_channels() {
            return Err(Error::Config(format!(
                "shortcut_1x1 takes {} channels but the block input has {}",
                shortcut_1x1.in_channels(),
                reduce_1x1.in_channels()
            )));
        }
        if shortcut_1x1.out_channels() != expand_1x1.out_channels() {
            return Err(Error::Config(format!(
                "shortcut_1x1 produces {} channels but expand_1x1 produces {}",
                shortcut_1x1.out_channels(),
                expand_1x1.out_channels()
            )));
        }
        if shortcut_1x1.conv.stride() != conv_3x3.conv.stride()
            || reduce_1x1.conv.stride() != 1
            || expand_1x1.conv.stride() != 1
        {
            return Err(Error::Config(format!(
                "shortcut_1x1 stride {} does not match the main branch stride {}",
                shortcut_1x1.conv.stride(),
                conv_3x3.conv.stride()
            )));
        }
        Ok(ConvBlock { reduce_1x1, conv_3x3, expand_1x1, shortcut_1x1 })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce_1x1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.expand_1x1.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv_3x3.conv.stride()
    }

    /// `relu(main(x) + shortcut(x))`.
    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        check_input(x, self.in_channels(), "conv block reduce_1x1")?;
        let m = self.reduce_1x1.forward(x, pass);
        let m = self.conv_3x3.forward(&m, pass);
        let m = self.expand_1x1.forward(&m, pass);
        let s = self.shortcut_1x1.forward(x, pass);
        Ok(Relu::forward(&m.add(&s), pass))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let d = Relu::backward(dy, pass);
        let mut dx = self.shortcut_1x1.backward(&d, pass);
        let dm = self.expand_1x1.backward(&d, pass);
        let dm = self.conv_3x3.backward(&dm, pass);
        dx.add_assign(&self.reduce_1x1.backward(&dm, pass));
        dx
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce_1x1.visit(&scoped(prefix, "reduce_1x1"), f);
        self.conv_3x3.visit(&scoped(prefix, "conv_3x3"), f);
        self.expand_1x1.visit(&scoped(prefix, "expand_1x1"), f);
        self.shortcut_1x1.visit(&scoped(prefix, "shortcut_1x1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce_1x1.visit_mut(&scoped(prefix, "reduce_1x1"), f);
        self.conv_3x3.visit_mut(&scoped(prefix, "conv_3x3"), f);
        self.expand_1x1.visit_mut(&scoped(prefix, "expand_1x1"), f);
        self.shortcut_1x1.visit_mut(&scoped(prefix, "shortcut_1x1"), f);
    }
}

/// Shape-preserving bottleneck block; the shortcut is the raw input.
#[derive(Clone, Debug)]
pub struct IdentityBlock<T> {
    pub reduce_1x1: ConvBn<T>,
    pub conv_3x3: ConvBn<T>,
    pub expand_1x1: ConvBn<T>,
}

impl<T: Scalar> IdentityBlock<T> {
    pub fn new(channels: usize, mid: usize) -> Self {
        IdentityBlock {
            reduce_1x1: ConvBn::new(channels, mid, 1, 1, true),
            conv_3x3: ConvBn::new(mid, mid, 3, 1, true),
            expand_1x1: ConvBn::zero_init(mid, channels, 1, 1, false),
        }
    }

    pub fn from_layers(reduce_1x1: ConvBn<T>, conv_3x3: ConvBn<T>, expand_1x1: ConvBn<T>) -> Result<Self> {
        if conv_3x3.in_channels() != reduce_1x1.out_channels() || expand_1x1.in_channels() != conv_3x3.out_channels()
        {
            return Err(Error::Config("identity block main branch widths do not chain".into()));
        }
        if expand_1x1.out_channels() != reduce_1x1.in_channels() {
            return Err(Error::Config(format!(
                "expand_1x1 produces {} channels but the identity shortcut carries {}",
                expand_1x1.out_channels(),
                reduce_1x1.in_channels()
            )));
        }
        if conv_3x3.conv.stride() != 1 || reduce_1x1.conv.stride() != 1 || expand_1x1.conv.stride() != 1 {
            return Err(Error::Config("identity block convolutions must have stride 1".into()));
        }
        Ok(IdentityBlock { reduce_1x1, conv_3x3, expand_1x1 })
    }

    pub fn channels(&self) -> usize {
        self.reduce_1x1.in_channels()
    }

    /// Main branch alone, before the residual sum.
    pub fn main_branch(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        check_input(x, self.channels(), "identity block reduce_1x1")?;
        let m = self.reduce_1x1.forward(x, pass);
        let m = self.conv_3x3.forward(&m, pass);
        Ok(self.expand_1x1.forward(&m, pass))
    }

    /// `relu(main(x) + x)`.
    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        let m = self.main_branch(x, pass)?;
        Ok(Relu::forward(&m.add(x), pass))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let d = Relu::backward(dy, pass);
        let dm = self.expand_1x1.backward(&d, pass);
        let dm = self.conv_3x3.backward(&dm, pass);
        let mut dx = self.reduce_1x1.backward(&dm, pass);
        dx.add_assign(&d);
        dx
    }
}

impl<T: Scalar> Module<T> for IdentityBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce_1x1.visit(&scoped(prefix, "reduce_1x1"), f);
        self.conv_3x3.visit(&scoped(prefix, "conv_3x3"), f);
        self.expand_1x1.visit(&scoped(prefix, "expand_1x1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce_1x1.visit_mut(&scoped(prefix, "reduce_1x1"), f);
        self.conv_3x3.visit_mut(&scoped(prefix, "conv_3x3"), f);
        self.expand_1x1.visit_mut(&scoped(prefix, "expand_1x1"), f);
    }
}

/// One residual group: a conv block then identity blocks.
#[derive(Clone, Debug)]
pub struct ResidualGroup<T> {
    pub head: ConvBlock<T>,
    pub tail: Vec<IdentityBlock<T>>,
}

impl<T: Scalar> ResidualGroup<T> {
    pub fn new(in_ch: usize, out_ch: usize, expansion: usize, depth: usize, stride: usize) -> Self {
        let mid = out_ch / expansion;
        ResidualGroup {
            head: ConvBlock::new(in_ch, mid, out_ch, stride),
            tail: (1..depth).map(|_| IdentityBlock::new(out_ch, mid)).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.tail.len()
    }

    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        let mut y = self.head.forward(x, pass)?;
        for block in &self.tail {
            y = block.forward(&y, pass)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let mut d = dy.clone();
        for block in self.tail.iter_mut().rev() {
            d = block.backward(&d, pass);
        }
        self.head.backward(&d, pass)
    }
}

impl<T: Scalar> Module<T> for ResidualGroup<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.head.visit(&scoped(prefix, "block0"), f);
        for (i, b) in self.tail.iter().enumerate() {
            b.visit(&scoped(prefix, &format!("block{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.head.visit_mut(&scoped(prefix, "block0"), f);
        for (i, b) in self.tail.iter_mut().enumerate() {
            b.visit_mut(&scoped(prefix, &format!("block{}", i + 1)), f);
        }
    }
}

/// Features of groups 3, 4 and 5 (strides 8, 16, 32).
#[derive(Clone, Debug, PartialEq)]
pub struct StagePyramid<T> {
    pub c3: Tensor<T>,
    pub c4: Tensor<T>,
    pub c5: Tensor<T>,
}

/// Stem and the four residual groups.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub stem: ConvBn<T>,
    /// Groups 2, 3, 4, 5.
    pub groups: Vec<ResidualGroup<T>>,
    config: BackboneConfig,
}

impl<T: Scalar> Backbone<T> {
    /// Uninitialized (all-zero) backbone; see [`crate::nn::initialize`].
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(config.input_channels, config.stem_channels, 7, 2, true);
        let mut in_ch = config.stem_channels;
        let mut groups = Vec::with_capacity(4);
        for g in 0..4 {
            let stride = if g == 0 { 1 } else { 2 };
            let out = config.group_widths[g];
            groups.push(ResidualGroup::new(in_ch, out, config.expansion, config.group_depths[g], stride));
            in_ch = out;
        }
        Ok(Backbone { stem, groups, config: config.clone() })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.config.input_channels {
            return Err(Error::Input(format!(
                "expected {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::Input(format!(
                "input size {h}×{w} must be a positive multiple of {OUTPUT_STRIDE} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Stem: conv/BN/ReLU then max pool (stride 4 overall).
    pub fn stem_forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let y = self.stem.forward(x, pass);
        MaxPool2d::forward(&y, pass)
    }

    pub fn stem_backward(&mut self, dy: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let d = MaxPool2d::backward(dy, pass);
        self.stem.backward(&d, pass)
    }

    /// Plain backbone pass without attention.
    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<StagePyramid<T>> {
        self.check_input(x)?;
        let y = self.stem_forward(x, pass);
        let y = self.groups[0].forward(&y, pass)?;
        let c3 = self.groups[1].forward(&y, pass)?;
        let c4 = self.groups[2].forward(&c3, pass)?;
        let c5 = self.groups[3].forward(&c4, pass)?;
        Ok(StagePyramid { c3, c4, c5 })
    }

    /// Reverse of [`Backbone::forward`]; the gradient w.r.t. each pyramid level is added
    /// where that level was produced.
    pub fn backward(&mut self, grads: &StagePyramid<T>, pass: &mut Pass) -> Tensor<T> {
        let d = self.groups[3].backward(&grads.c5, pass);
        let d = self.groups[2].backward(&d.add(&grads.c4), pass);
        let d = self.groups[1].backward(&d.add(&grads.c3), pass);
        let d = self.groups[0].backward(&d, pass);
        self.stem_backward(&d, pass)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&scoped(prefix, "stem.conv"), f);
        for (i, g) in self.groups.iter().enumerate() {
            g.visit(&scoped(prefix, &format!("group{}", i + 2)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&scoped(prefix, "stem.conv"), f);
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.visit_mut(&scoped(prefix, &format!("group{}", i + 2)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::initialize;

    fn input(shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |n, c, h, w| (((n * 31 + c * 17 + h * 7 + w * 3) % 23) as f64 - 11.0) / 7.0)
    }

    #[test]
    fn conv_block_shapes() {
        let mut b = ConvBlock::<f64>::new(64, 64, 256, 1);
        initialize(&mut b, 1);
        let y = b.forward(&input([1, 64, 56, 56]), &mut Pass::eval()).unwrap();
        assert_eq!(y.shape(), [1, 256, 56, 56]);

        let mut b = ConvBlock::<f64>::new(256, 128, 512, 2);
        initialize(&mut b, 1);
        let y = b.forward(&input([1, 256, 56, 56]), &mut Pass::eval()).unwrap();
        assert_eq!(y.shape(), [1, 512, 28, 28]);
    }

    #[test]
    fn conv_block_all_zero_gives_zero() {
        let mut b = ConvBlock::<f64>::new(8, 4, 16, 2);
        b.visit_mut("", &mut |_, p| p.fill(0.0));
        let y = b.forward(&input([2, 8, 8, 8]), &mut Pass::train(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = b.forward(&input([2, 8, 8, 8]), &mut Pass::eval()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_is_relu_at_init() {
        let mut b = IdentityBlock::<f64>::new(16, 4);
        initialize(&mut b, 3);
        let x = input([2, 16, 6, 6]);
        let y = b.forward(&x, &mut Pass::train(0)).unwrap();
        assert_eq!(y, x.map(|v| v.max(0.0)));
    }

    #[test]
    fn identity_block_residual_is_main_branch_in_linear_region() {
        let mut b = IdentityBlock::<f64>::new(8, 4);
        initialize(&mut b, 5);
        b.expand_1x1.bn.gamma.fill(0.3);
        // Shift the input far into the positive range so relu(main + x) is linear.
        let x = input([1, 8, 5, 5]).map(|v| v + 50.0);
        let main = b.main_branch(&x, &mut Pass::eval()).unwrap();
        let y = b.forward(&x, &mut Pass::eval()).unwrap();
        assert!(y.sub(&x).max_abs_diff(&main) < 1e-12);
    }

    #[test]
    fn from_layers_names_offender() {
        let err = ConvBlock::<f32>::from_layers(
            ConvBn::new(8, 4, 1, 1, true),
            ConvBn::new(4, 4, 3, 1, true),
            ConvBn::new(4, 16, 1, 1, false),
            ConvBn::new(8, 12, 1, 1, false),
        )
        .unwrap_err();
        assert!(err.to_string().contains("shortcut_1x1"), "{err}");

        let err = IdentityBlock::<f32>::from_layers(
            ConvBn::new(8, 4, 1, 1, true),
            ConvBn::new(4, 4, 3, 1, true),
            ConvBn::new(4, 16, 1, 1, false),
        )
        .unwrap_err();
        assert!(err.to_string().contains("expand_1x1"), "{err}");
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let b = IdentityBlock::<f32>::new(8, 2);
        assert!(matches!(b.forward(&Tensor::zeros([1, 4, 2, 2]), &mut Pass::eval()), Err(Error::Shape(_))));
    }

    #[test]
    fn desk_pyramid_shapes() {
        let mut bb = Backbone::<f32>::new(&BackboneConfig::desk()).unwrap();
        initialize(&mut bb, 0);
        let p = bb.forward(&Tensor::zeros([1, 3, 64, 64]), &mut Pass::eval()).unwrap();
        assert_eq!(p.c3.shape(), [1, 64, 8, 8]);
        assert_eq!(p.c4.shape(), [1, 128, 4, 4]);
        assert_eq!(p.c5.shape(), [1, 256, 2, 2]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let bb = Backbone::<f32>::new(&BackboneConfig::desk()).unwrap();
        let err = bb.forward(&Tensor::zeros([1, 3, 48, 64]), &mut Pass::eval()).unwrap_err();
        assert!(err.to_string().contains("multiple of 32"), "{err}");
    }

    #[test]
    fn invalid_config() {
        let mut c = BackboneConfig::desk();
        c.group_widths[2] = 130;
        assert!(matches!(Backbone::<f32>::new(&c), Err(Error::Config(_))));
        let mut c = BackboneConfig::desk();
        c.group_depths[0] = 0;
        assert!(Backbone::<f32>::new(&c).is_err());
    }
}
