//! The assembled classifier: backbone → dual attention (groups 4 and 5) →
//! bilateral fusion → pooled linear head.

use serde::{Deserialize, Serialize};

use crate::attention::{DualAttention, DEFAULT_REDUCTION};
use crate::backbone::{Backbone, BackboneConfig, StagePyramid, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::fpan::{ClassifierHead, Fpan, FpanConfig};
use crate::nn::{initialize, scoped, Module, Param, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a dual-attention unit is inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSite {
    /// After the group-4 output, before group 5.
    G4,
    /// After the group-5 output, before fusion.
    G5,
}

impl AttentionSite {
    pub fn key(self) -> &'static str {
        match self {
            AttentionSite::G4 => "g4",
            AttentionSite::G5 => "g5",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// `[height, width]`, both multiples of 32.
    pub input_size: [usize; 2],
    pub backbone: BackboneConfig,
    pub attention_sites: Vec<AttentionSite>,
    pub attention_reduction: usize,
    pub fpan: FpanConfig,
}

impl ModelConfig {
    /// 224×224 input, widths 256–2048, depths [3, 4, 6, 3], fused width 256.
    pub fn full() -> Self {
        ModelConfig {
            preset: Preset::Full,
            input_size: [224, 224],
            backbone: BackboneConfig::full(),
            attention_sites: vec![AttentionSite::G4, AttentionSite::G5],
            attention_reduction: DEFAULT_REDUCTION,
            fpan: FpanConfig::full(),
        }
    }

    /// 64×64 input, widths 32–256, one block per group, fused width 64.
    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            input_size: [64, 64],
            backbone: BackboneConfig::desk(),
            attention_sites: vec![AttentionSite::G4, AttentionSite::G5],
            attention_reduction: DEFAULT_REDUCTION,
            fpan: FpanConfig::desk(),
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn has_site(&self, site: AttentionSite) -> bool {
        self.attention_sites.contains(&site)
    }

    pub fn num_classes(&self) -> usize {
        self.fpan.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input_size {h}×{w} must be a positive multiple of {OUTPUT_STRIDE}"
            )));
        }
        self.backbone.validate()?;
        self.fpan.validate()?;
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention_reduction must be at least 1".into()));
        }
        let mut sites = self.attention_sites.clone();
        sites.sort();
        sites.dedup();
        if sites.len() != self.attention_sites.len() {
            return Err(Error::Config("attention_sites lists a site twice".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Full parameter tree plus the configuration it was built from.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    pub attention_g4: Option<DualAttention<T>>,
    pub attention_g5: Option<DualAttention<T>>,
    pub fpan: Fpan<T>,
    pub head: ClassifierHead<T>,
    config: ModelConfig,
}

impl<T: Scalar> Model<T> {
    /// Allocate the parameter tree with all values zero.
    pub fn uninitialized(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config.backbone)?;
        let [w3, w4, w5] = config.backbone.pyramid_channels();
        let attention = |site, width| -> Result<Option<DualAttention<T>>> {
            if config.has_site(site) {
                Ok(Some(DualAttention::new(width, config.attention_reduction)?))
            } else {
                Ok(None)
            }
        };
        Ok(Model {
            backbone,
            attention_g4: attention(AttentionSite::G4, w4)?,
            attention_g5: attention(AttentionSite::G5, w5)?,
            fpan: Fpan::new([w3, w4, w5], config.fpan.fused_width)?,
            head: ClassifierHead::new(config.fpan.fused_width, config.fpan.num_classes, config.fpan.head_dropout),
            config: config.clone(),
        })
    }

    /// Deterministic initialization from `(config, seed)`.
    ///
    /// Every leaf draws from a stream keyed by its own name, so layers shared
    /// between two configurations get identical values under the same seed.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninitialized(config)?;
        initialize(&mut model, seed);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let [eh, ew] = self.config.input_size;
        if h != eh || w != ew || c != self.config.backbone.input_channels {
            return Err(Error::Input(format!(
                "expected input {}×{eh}×{ew}, got {c}×{h}×{w}",
                self.config.backbone.input_channels
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(())
    }

    /// Backbone with attention applied to the group-4 and group-5 outputs.
    pub fn features(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<StagePyramid<T>> {
        self.check_input(x)?;
        let bb = &self.backbone;
        let y = bb.stem_forward(x, pass);
        let y = bb.groups[0].forward(&y, pass)?;
        let c3 = bb.groups[1].forward(&y, pass)?;
        let mut c4 = bb.groups[2].forward(&c3, pass)?;
        if let Some(att) = &self.attention_g4 {
            c4 = att.forward(&c4, pass)?;
        }
        let mut c5 = bb.groups[3].forward(&c4, pass)?;
        if let Some(att) = &self.attention_g5 {
            c5 = att.forward(&c5, pass)?;
        }
        Ok(StagePyramid { c3, c4, c5 })
    }

    /// Raw logits `[n, num_classes, 1, 1]`. Training mode (from `pass`)
    /// enables dropout and batch statistics.
    pub fn forward(&self, x: &Tensor<T>, pass: &mut Pass) -> Result<Tensor<T>> {
        let pyr = self.features(x, pass)?;
        let fused = self.fpan.forward(&pyr, pass)?;
        self.head.forward(&fused, pass)
    }

    /// Evaluation-mode logits.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, &mut Pass::eval())
    }

    /// Accumulate parameter gradients for `dlogits`; returns the input gradient.
    pub fn backward(&mut self, dlogits: &Tensor<T>, pass: &mut Pass) -> Tensor<T> {
        let dfused = self.head.backward(dlogits, pass);
        let dpyr = self.fpan.backward(&dfused, pass);
        let bb = &mut self.backbone;
        let mut d5 = dpyr.c5;
        if let Some(att) = &mut self.attention_g5 {
            d5 = att.backward(&d5, pass);
        }
        let mut d4 = bb.groups[3].backward(&d5, pass).add(&dpyr.c4);
        if let Some(att) = &mut self.attention_g4 {
            d4 = att.backward(&d4, pass);
        }
        let d3 = bb.groups[2].backward(&d4, pass).add(&dpyr.c3);
        let d = bb.groups[1].backward(&d3, pass);
        let d = bb.groups[0].backward(&d, pass);
        bb.stem_backward(&d, pass)
    }

    /// True when every parameter and buffer is finite.
    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }

    /// Same architecture with values converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::uninitialized(&self.config).expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| {
            let src = it.next().expect("same tree");
            p.value = src.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect();
        });
        out
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit(prefix, f);
        if let Some(att) = &self.attention_g4 {
            att.visit(&scoped(prefix, "attention.g4"), f);
        }
        if let Some(att) = &self.attention_g5 {
            att.visit(&scoped(prefix, "attention.g5"), f);
        }
        self.fpan.visit(&scoped(prefix, "fpan"), f);
        self.head.visit(&scoped(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_mut(prefix, f);
        if let Some(att) = &mut self.attention_g4 {
            att.visit_mut(&scoped(prefix, "attention.g4"), f);
        }
        if let Some(att) = &mut self.attention_g5 {
            att.visit_mut(&scoped(prefix, "attention.g5"), f);
        }
        self.fpan.visit_mut(&scoped(prefix, "fpan"), f);
        self.head.visit_mut(&scoped(prefix, "head"), f);
    }
}
