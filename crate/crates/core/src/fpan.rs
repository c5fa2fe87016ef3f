//! Bilateral multi-scale fusion and the classification head.
//!
//! Passes are named by data flow: the top-down pass runs deep→shallow with
//! nearest-neighbour upsampling, the bottom-up pass runs shallow→deep with
//! stride-2 convolutions. Every fused map has exactly `fused_width` channels.

use serde::{Deserialize, Serialize};

use crate::backbone::{ConvBn, StagePyramid};
use crate::error::{Error, Result};
use crate::nn::{concat_channels, scoped, split_channels, Dropout, GlobalAvgPool, Linear, Module, Param, Pass, Upsample2x};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpanConfig {
    pub fused_width: usize,
    pub num_classes: usize,
    pub head_dropout: f64,
}

impl FpanConfig {
    pub fn full() -> Self {
        FpanConfig { fused_width: 256, num_classes: 21, head_dropout: 0.2 }
    }

    pub fn desk() -> Self {
        FpanConfig { fused_width: 64, num_classes: 21, head_dropout: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fused_width == 0 {
            return Err(Error::Config("fused_width must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head_dropout {} outside [0, 1)", self.head_dropout)));
        }
        Ok(())
    }
}

/// Three equally wide maps at strides 8, 16, 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLevels<T> {
    pub l3: Tensor<T>,
    pub l4: Tensor<T>,
    pub l5: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Fpan<T> {
    pub lateral3: ConvBn<T>,
    pub lateral4: ConvBn<T>,
    pub lateral5: ConvBn<T>,
    pub smooth_td3: ConvBn<T>,
    pub smooth_td4: ConvBn<T>,
    pub down3: ConvBn<T>,
    pub down4: ConvBn<T>,
    pub smooth_bu4: ConvBn<T>,
    pub smooth_bu5: ConvBn<T>,
    width: usize,
}

fn check_ratio<T: Scalar>(fine: &Tensor<T>, coarse: &Tensor<T>, names: &str) -> Result<()> {
    if fine.height() != 2 * coarse.height() || fine.width() != 2 * coarse.width() || fine.batch() != coarse.batch() {
        return Err(Error::Shape(format!(
            "{names}: expected a 2× spatial ratio, got {}×{} and {}×{}",
            fine.height(),
            fine.width(),
            coarse.height(),
            coarse.width()
        )));
    }
    Ok(())
}

impl<T: Scalar> Fpan<T> {
    /// `in_channels` are the widths of c3, c4, c5.
    pub fn new(in_channels: [usize; 3], width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("fused_width must be at least 1".into()));
        }
        let smooth = || ConvBn::new(width, width, 3, 1, true);
        Ok(Fpan {
            lateral3: ConvBn::new(in_channels[0], width, 1, 1, false),
            lateral4: ConvBn::new(in_channels[1], width, 1, 1, false),
            lateral5: ConvBn::new(in_channels[2], width, 1, 1, false),
            smooth_td3: smooth(),
            smooth_td4: smooth(),
            down3: ConvBn::new(width, width, 3, 2, true),
            down4: ConvBn::new(width, width, 3, 2, true),
            smooth_bu4: smooth(),
            smooth_bu5: smooth(),
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `p5 = lat5(c5)`, `p4 = smooth(lat4(c4) + up(p5))`, `p3 = smooth(lat3(c3) + up(p4))`.
    pub fn top_down(&self, pyr: &StagePyramid<T>, pass: &mut Pass) -> Result<FusedLevels<T>> {
        check_ratio(&pyr.c4, &pyr.c5, "c4/c5")?;
        check_ratio(&pyr.c3, &pyr.c4, "c3/c4")?;
        for (name, t, layer) in [("c3", &pyr.c3, &self.lateral3), ("c4", &pyr.c4, &self.lateral4), ("c5", &pyr.c5, &self.lateral5)] {
            if t.channels() != layer.in_channels() {
                return Err(Error::Shape(format!(
                    "{name} has {} channels, lateral projection expects {}",
                    t.channels(),
                    layer.in_channels()
                )));
            }
        }
        let p5 = self.lateral5.forward(&pyr.c5, pass);
        let p4 = self.lateral4.forward(&pyr.c4, pass).add(&Upsample2x::forward(&p5));
        let p4 = self.smooth_td4.forward(&p4, pass);
        let p3 = self.lateral3.forward(&pyr.c3, pass).add(&Upsample2x::forward(&p4));
        let p3 = self.smooth_td3.forward(&p3, pass);
        Ok(FusedLevels { l3: p3, l4: p4, l5: p5 })
    }

    /// `n3 = p3`, `n4 = smooth(p4 + down(n3))`, `n5 = smooth(p5 + down(n4))`.
    pub fn bottom_up(&self, p: &FusedLevels<T>, pass: &mut Pass) -> Result<FusedLevels<T>> {
        for (name, t) in [("p3", &p.l3), ("p4", &p.l4), ("p5", &p.l5)] {
            if t.channels() != self.width {
                return Err(Error::Shape(format!("{name} has {} channels, expected {}", t.channels(), self.width)));
            }
        }
        check_ratio(&p.l3, &p.l4, "p3/p4")?;
        check_ratio(&p.l4, &p.l5, "p4/p5")?;
        let n3 = p.l3.clone();
        let n4 = self.smooth_bu4.forward(&p.l4.add(&self.down3.forward(&n3, pass)), pass);
        let n5 = self.smooth_bu5.forward(&p.l5.add(&self.down4.forward(&n4, pass)), pass);
        Ok(FusedLevels { l3: n3, l4: n4, l5: n5 })
    }

    pub fn forward(&self, pyr: &StagePyramid<T>, pass: &mut Pass) -> Result<FusedLevels<T>> {
        let p = self.top_down(pyr, pass)?;
        self.bottom_up(&p, pass)
    }

    /// Gradients w.r.t. the fused outputs → gradients w.r.t. the pyramid.
    pub fn backward(&mut self, dn: &FusedLevels<T>, pass: &mut Pass) -> StagePyramid<T> {
        // bottom-up
        let g5 = self.smooth_bu5.backward(&dn.l5, pass);
        let mut dp5 = g5.clone();
        let dn4 = dn.l4.add(&self.down4.backward(&g5, pass));
        let g4 = self.smooth_bu4.backward(&dn4, pass);
        let mut dp4 = g4.clone();
        let dp3 = dn.l3.add(&self.down3.backward(&g4, pass));

        // top-down
        let g3 = self.smooth_td3.backward(&dp3, pass);
        let dc3 = self.lateral3.backward(&g3, pass);
        dp4.add_assign(&Upsample2x::backward(&g3));
        let g4 = self.smooth_td4.backward(&dp4, pass);
        let dc4 = self.lateral4.backward(&g4, pass);
        dp5.add_assign(&Upsample2x::backward(&g4));
        let dc5 = self.lateral5.backward(&dp5, pass);
        StagePyramid { c3: dc3, c4: dc4, c5: dc5 }
    }
}

impl<T: Scalar> Module<T> for Fpan<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.lateral3.visit(&scoped(prefix, "lateral3"), f);
        self.lateral4.visit(&scoped(prefix, "lateral4"), f);
        self.lateral5.visit(&scoped(prefix, "lateral5"), f);
        self.smooth_td3.visit(&scoped(prefix, "smooth_td3"), f);
        self.smooth_td4.visit(&scoped(prefix, "smooth_td4"), f);
        self.down3.visit(&scoped(prefix, "down3"), f);
        self.down4.visit(&scoped(prefix, "down4"), f);
        self.smooth_bu4.visit(&scoped(prefix, "smooth_bu4"), f);
        self.smooth_bu5.visit(&scoped(prefix, "smooth_bu5"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.lateral3.visit_mut(&scoped(prefix, "lateral3"), f);
        self.lateral4.visit_mut(&scoped(prefix, "lateral4"), f);
        self.lateral5.visit_mut(&scoped(prefix, "lateral5"), f);
        self.smooth_td3.visit_mut(&scoped(prefix, "smooth_td3"), f);
        self.smooth_td4.visit_mut(&scoped(prefix, "smooth_td4"), f);
        self.down3.visit_mut(&scoped(prefix, "down3"), f);
        self.down4.visit_mut(&scoped(prefix, "down4"), f);
        self.smooth_bu4.visit_mut(&scoped(prefix, "smooth_bu4"), f);
        self.smooth_bu5.visit_mut(&scoped(prefix, "smooth_bu5"), f);
    }
}

/// Global-average-pool each level, concatenate, dropout, affine map to logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub linear: Linear<T>,
    pub dropout: f64,
    width: usize,
}

struct HeadCache {
    shapes: [[usize; 4]; 3],
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(width: usize, num_classes: usize, dropout: f64) -> Self {
        ClassifierHead { linear: Linear::new(3 * width, num_classes), dropout, width }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_features()
    }

    /// Raw logits, `[n, num_classes, 1, 1]`.
    pub fn forward(&self, levels: &FusedLevels<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        for (name, t) in [("n3", &levels.l3), ("n4", &levels.l4), ("n5", &levels.l5)] {
            if t.channels() != self.width {
                return Err(Error::Shape(format!("{name} has {} channels, head expects {}", t.channels(), self.width)));
            }
        }
        let pooled: Vec<Tensor<T>> =
            [&levels.l3, &levels.l4, &levels.l5].iter().map(|t| GlobalAvgPool::forward(t)).collect();
        let cat = concat_channels(&[&pooled[0], &pooled[1], &pooled[2]]);
        pass.record(|| HeadCache { shapes: [levels.l3.shape(), levels.l4.shape(), levels.l5.shape()] });
        let dropped = Dropout::forward(&cat, self.dropout, pass);
        Ok(self.linear.forward(&dropped, pass))
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>, pass: &mut Pass) -> FusedLevels<T> {
        let d = self.linear.backward(dlogits, pass);
        let d = Dropout::backward(&d, pass);
        let HeadCache { shapes } = pass.take::<HeadCache>();
        let parts = split_channels(&d, &[self.width; 3]);
        FusedLevels {
            l3: GlobalAvgPool::backward(&parts[0], shapes[0]),
            l4: GlobalAvgPool::backward(&parts[1], shapes[1]),
            l5: GlobalAvgPool::backward(&parts[2], shapes[2]),
        }
    }
}

impl<T: Scalar> Module<T> for ClassifierHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.linear.visit(&scoped(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_mut(&scoped(prefix, "linear"), f);
    }
}
