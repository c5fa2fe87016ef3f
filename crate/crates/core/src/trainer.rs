//! Cross-entropy training with AdamW, per-epoch history, best/last
//! checkpoints, and split evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{compute_norm_stats, load_split, split_manifest, Augment, DatasetManifest, LoadedSplit, NormStats, Split};
use crate::error::{Error, Result};
use crate::metrics::{topk_accuracy, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::nn::{Module, Pass};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::schedule::{compute_lr_bounds, lr_at_epoch, LRScheduleConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Metadata key holding the training-split normalization stats.
pub const NORM_STATS_KEY: &str = "norm_stats";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Milestones are fractions of `epochs`; `schedule.total_epochs` is
    /// replaced by `epochs` when training.
    pub schedule: LRScheduleConfig,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm limit; off when absent.
    pub grad_clip: Option<f64>,
    pub augment: Augment,
    /// Validate every N epochs (the final epoch is always validated).
    pub eval_every: usize,
    /// Used when the manifest has no split assigned yet.
    pub split_ratios: [u32; 3],
    /// Directory for checkpoints and history; nothing is written when absent.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            seed: 0,
            schedule: LRScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            grad_clip: None,
            augment: Augment::default(),
            eval_every: 1,
            split_ratios: [7, 2, 1],
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.optimizer.validate()?;
        self.effective_schedule().validate()
    }

    pub fn effective_schedule(&self) -> LRScheduleConfig {
        LRScheduleConfig { total_epochs: self.epochs, ..self.schedule.clone() }
    }

    /// The rate used in every epoch.
    pub fn lr_schedule(&self) -> Result<Vec<f64>> {
        let sched = self.effective_schedule();
        let bounds = compute_lr_bounds(&sched, self.batch_size)?;
        (0..self.epochs).map(|e| lr_at_epoch(&bounds, &sched, e)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    /// Training-mode (dropout, augmentation) top-1 over the epoch.
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "epoch,train_loss,train_top1,val_top1,val_top5,lr";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                s,
                "{},{:?},{:?},{},{},{:?}",
                r.epoch,
                r.train_loss,
                r.train_top1,
                opt(r.val_top1),
                opt(r.val_top5),
                r.lr
            )
            .unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let perr = |m: String| Error::Parse(format!("history: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(perr("unexpected header".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("{s:?}: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(perr(format!("expected 6 fields in {line:?}")));
            }
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|e| perr(format!("{e}")))?,
                train_loss: num(f[1])?,
                train_top1: num(f[2])?,
                val_top1: opt(f[3])?,
                val_top5: opt(f[4])?,
                lr: num(f[5])?,
            });
        }
        Ok(TrainHistory { records })
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`, and its gradient
/// with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &[T], num_classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes || labels.is_empty() {
        return Err(Error::Shape(format!("{} logits for {} labels × {num_classes}", logits.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
    }
    let n = T::from_usize(labels.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks(num_classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) / n);
        }
    }
    Ok((loss / n, grad))
}

pub fn cross_entropy_loss<T: Scalar>(logits: &[T], num_classes: usize, labels: &[usize]) -> Result<T> {
    cross_entropy_with_grad(logits, num_classes, labels).map(|(l, _)| l)
}

/// Softmax of one logit row, max-shifted.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub last: Model<T>,
    pub history: TrainHistory,
    pub norm_stats: NormStats,
    /// The manifest as split for this run.
    pub manifest: DatasetManifest,
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    // splitmix64 finalizer over the combined index
    let mut z = seed ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Eval-mode logits of every item of a split, in chunks of `batch_size`.
pub fn predict_split<T: Scalar>(model: &Model<T>, data: &LoadedSplit, stats: &NormStats, batch_size: usize) -> Result<Vec<T>> {
    let mut logits = Vec::with_capacity(data.len() * model.num_classes());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T, ChaCha8Rng>(chunk, stats, None);
        logits.extend_from_slice(model.predict_logits(&x)?.data());
    }
    Ok(logits)
}

pub fn evaluate_loaded<T: Scalar>(model: &Model<T>, data: &LoadedSplit, stats: &NormStats, classes: &[String]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let logits = predict_split(model, data, stats, 32)?;
    let report = EvalReport::from_logits(&logits, &data.labels, classes)?;
    for c in report.absent_classes() {
        log::warn!("class {} has no samples in this split; recall reported as 1.0", classes[c]);
    }
    Ok(report)
}

fn class_names(manifest: &DatasetManifest, num_classes: usize) -> Vec<String> {
    let mut names = manifest.classes.clone();
    names.truncate(num_classes);
    let base = names.len();
    names.extend((base..num_classes).map(|i| crate::data::taxonomy::abbreviation(i).map_or(format!("class{i}"), String::from)));
    names
}

/// Evaluate a stored checkpoint on one split of a manifest.
pub fn evaluate<T: Scalar>(checkpoint: &Path, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
    let (model, meta) = load_checkpoint::<T>(checkpoint)?;
    let stats = stats_from_metadata(&meta)?;
    evaluate_model(&model, &stats, manifest, split)
}

pub fn evaluate_model<T: Scalar>(model: &Model<T>, stats: &NormStats, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
    let data = load_split(manifest, split, model.config().input_size)?;
    evaluate_loaded(model, &data, stats, &class_names(manifest, model.num_classes()))
}

pub fn stats_from_metadata(meta: &BTreeMap<String, String>) -> Result<NormStats> {
    match meta.get(NORM_STATS_KEY) {
        Some(text) => NormStats::from_json(text),
        None => {
            log::warn!("checkpoint carries no normalization stats; using identity");
            Ok(NormStats::IDENTITY)
        }
    }
}

pub fn checkpoint_metadata(stats: &NormStats, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([(NORM_STATS_KEY.to_string(), stats.to_json()), ("epoch".to_string(), epoch.to_string())])
}

pub fn train<T: Scalar>(cfg: &TrainConfig, manifest: &DatasetManifest, model_cfg: &ModelConfig) -> Result<TrainOutcome<T>> {
    train_with_observer(cfg, manifest, model_cfg, &mut |_| {})
}

/// [`train`], calling `observe` after every epoch.
pub fn train_with_observer<T: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if manifest.num_classes() > model_cfg.num_classes() {
        return Err(Error::Config(format!(
            "manifest has {} classes but the model predicts {}",
            manifest.num_classes(),
            model_cfg.num_classes()
        )));
    }
    let manifest =
        if manifest.is_split() { manifest.clone() } else { split_manifest(manifest, cfg.split_ratios, cfg.seed)? };
    let train_data = load_split(&manifest, Split::Train, model_cfg.input_size)?;
    if train_data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val_data = load_split(&manifest, Split::Val, model_cfg.input_size)?;
    let classes = class_names(&manifest, model_cfg.num_classes());
    let stats = compute_norm_stats(&train_data.images);
    let lrs = cfg.lr_schedule()?;

    let mut model = Model::<T>::build(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);

    let k = model_cfg.num_classes();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for (epoch, &lr) in lrs.iter().enumerate() {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0.0, 0usize);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // batch statistics of a single item are degenerate
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        for (b, idx) in batches.into_iter().enumerate() {
            let (x, labels) = train_data.batch::<T, _>(idx, &stats, Some((&cfg.augment, &mut aug_rng)));
            let mut pass = Pass::train(batch_seed(cfg.seed, epoch, b));
            let logits = model.forward(&x, &mut pass)?;
            let (loss, dlogits) = cross_entropy_with_grad(logits.data(), k, &labels)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            model.zero_grad();
            model.backward(&Tensor::from_vec(logits.shape(), dlogits)?, &mut pass);
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut model, max);
            }
            opt.step(&mut model, lr);
            loss_sum += loss * labels.len() as f64;
            hits += topk_accuracy(logits.data(), k, &labels, 1)? * labels.len() as f64;
            seen += labels.len();
        }
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, lr });
        }
        let validate = !val_data.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let (val_top1, val_top5) = if validate {
            let r = evaluate_loaded(&model, &val_data, &stats, &classes)?;
            (Some(r.top1), Some(r.top5))
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_top1: hits / seen as f64,
            val_top1,
            val_top5,
            lr,
        };
        log::info!(
            "epoch={} loss={:.5} train_top1={:.4} val_top1={} lr={:?}",
            epoch,
            record.train_loss,
            record.train_top1,
            val_top1.map_or("-".into(), |v| format!("{v:.4}")),
            lr
        );
        observe(&record);
        history.records.push(record);
        if let Some(v) = val_top1 {
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                if let Some(dir) = &cfg.output_dir {
                    save_checkpoint(&model, &checkpoint_metadata(&stats, epoch), &dir.join(BEST_CHECKPOINT))?;
                }
                best = Some((v, epoch, model.clone()));
            }
        }
    }

    let last_epoch = cfg.epochs - 1;
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => {
            if let Some(dir) = &cfg.output_dir {
                save_checkpoint(&model, &checkpoint_metadata(&stats, last_epoch), &dir.join(BEST_CHECKPOINT))?;
            }
            (last_epoch, model.clone())
        }
    };
    if let Some(dir) = &cfg.output_dir {
        save_checkpoint(&model, &checkpoint_metadata(&stats, last_epoch), &dir.join(LAST_CHECKPOINT))?;
        let path = dir.join(HISTORY_FILE);
        fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(crate::data::synth::MANIFEST_FILE);
        manifest.write(&path)?;
    }
    Ok(TrainOutcome { best: best_model, best_epoch, last: model, history, norm_stats: stats, manifest })
}
