//! Batch-size-scaled learning-rate bounds and a stepwise decay over epochs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the batch size enters the bound computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// `(batch_size / nbs) · lr_init`: nominal-batch scaling.
    #[default]
    Nominal,
    /// `batch_size / (nbs · lr_init)`: the fraction taken as written. Kept
    /// for comparison; it saturates at the upper limit for every batch size.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LRScheduleConfig {
    pub lr_max_init: f64,
    pub lr_min_init: f64,
    pub lr_max_lim: f64,
    pub lr_min_lim: f64,
    /// Nominal batch size.
    pub nbs: usize,
    pub total_epochs: usize,
    pub decay_factor: f64,
    /// Fractions of `total_epochs` at which the rate is multiplied by `decay_factor`.
    pub decay_milestones: Vec<f64>,
    pub scaling: Scaling,
}

impl Default for LRScheduleConfig {
    fn default() -> Self {
        LRScheduleConfig {
            lr_max_init: 0.01,
            lr_min_init: 0.0001,
            lr_max_lim: 0.001,
            lr_min_lim: 0.0001,
            nbs: 64,
            total_epochs: 200,
            decay_factor: 0.1,
            decay_milestones: vec![0.6, 0.85],
            scaling: Scaling::Nominal,
        }
    }
}

impl LRScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.lr_min_init) && self.lr_min_init <= self.lr_max_init) {
            return Err(Error::Config("need 0 < lr_min_init <= lr_max_init".into()));
        }
        if !(pos(self.lr_min_lim) && self.lr_min_lim <= self.lr_max_lim) {
            return Err(Error::Config("need 0 < lr_min_lim <= lr_max_lim".into()));
        }
        if self.nbs == 0 {
            return Err(Error::Config("nbs must be at least 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("decay milestones must be fractions in [0, 1]".into()));
        }
        Ok(())
    }

    /// First epoch at which each milestone applies.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.decay_milestones.iter().map(|f| (f * self.total_epochs as f64).round() as usize).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LRBounds {
    pub lr_max: f64,
    pub lr_min: f64,
}

pub fn compute_lr_bounds(cfg: &LRScheduleConfig, batch_size: usize) -> Result<LRBounds> {
    if batch_size < 1 {
        return Err(Error::Input("batch_size must be at least 1".into()));
    }
    cfg.validate()?;
    let b = batch_size as f64;
    let nbs = cfg.nbs as f64;
    let scaled = |init: f64| match cfg.scaling {
        Scaling::Nominal => b / nbs * init,
        Scaling::Literal => b / (nbs * init),
    };
    let lr_mid_max = scaled(cfg.lr_max_init).max(cfg.lr_min_lim);
    let lr_max = lr_mid_max.min(cfg.lr_max_lim);
    let lr_mid_min = scaled(cfg.lr_min_init).max(cfg.lr_min_lim / 100.0);
    let lr_min = lr_mid_min.min(cfg.lr_max_lim / 100.0);
    Ok(LRBounds { lr_max, lr_min })
}

/// `lr_max` times `decay_factor` once per milestone reached, floored at `lr_min`.
pub fn lr_at_epoch(bounds: &LRBounds, cfg: &LRScheduleConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Input(format!("epoch {epoch} outside 0..{}", cfg.total_epochs)));
    }
    let mut lr = bounds.lr_max;
    for m in cfg.milestone_epochs() {
        if epoch >= m {
            lr *= cfg.decay_factor;
        }
    }
    Ok(lr.max(bounds.lr_min))
}

/// Every epoch's rate for `batch_size`.
pub fn lr_table(cfg: &LRScheduleConfig, batch_size: usize) -> Result<Vec<f64>> {
    let bounds = compute_lr_bounds(cfg, batch_size)?;
    (0..cfg.total_epochs).map(|e| lr_at_epoch(&bounds, cfg, e)).collect()
}

/// `epoch,lr` CSV with shortest round-trip float formatting.
pub fn lr_csv(cfg: &LRScheduleConfig, batch_size: usize) -> Result<String> {
    let mut out = String::from("epoch,lr\n");
    for (e, lr) in lr_table(cfg, batch_size)?.into_iter().enumerate() {
        writeln!(out, "{e},{lr:?}").unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_reading_saturates() {
        let cfg = LRScheduleConfig { scaling: Scaling::Literal, ..Default::default() };
        for b in [1, 2, 16, 64, 256] {
            let bounds = compute_lr_bounds(&cfg, b).unwrap();
            assert_eq!(bounds.lr_max, cfg.lr_max_lim);
            assert_eq!(bounds.lr_min, cfg.lr_max_lim / 100.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = LRScheduleConfig::default();
        assert!(matches!(compute_lr_bounds(&cfg, 0), Err(Error::Input(_))));
        let b = compute_lr_bounds(&cfg, 16).unwrap();
        assert!(matches!(lr_at_epoch(&b, &cfg, 200), Err(Error::Input(_))));
        let bad = LRScheduleConfig { lr_min_init: 0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LRScheduleConfig { nbs: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn milestones_land_on_whole_epochs() {
        assert_eq!(LRScheduleConfig::default().milestone_epochs(), vec![120, 170]);
    }

    #[test]
    fn csv_first_row() {
        let csv = lr_csv(&LRScheduleConfig::default(), 64).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,lr"));
        assert_eq!(lines.next(), Some("0,0.001"));
        assert_eq!(csv.lines().count(), 201);
    }
}
