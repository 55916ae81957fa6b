//! Run hyperparameters and the derived training schedule.

use serde::{Deserialize, Serialize};

use crate::criteria::{validate_pool, CosineForm, Criterion};
use crate::error::{Error, Result};
pub use crate::flops::StepMode;

/// Every knob of a prune-while-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Epochs trained before pruning. `None` means the epoch right before
    /// the first learning-rate decay.
    pub prune_epoch: Option<usize>,
    /// Total schedule length, not counting recovery fine-tunes.
    pub max_epochs: usize,
    /// Fraction of baseline FLOPs to remove. Zero disables pruning.
    pub target_rate: f64,
    /// FLOPs fraction one pruning iteration aims to remove.
    pub step_rate: f64,
    /// Cap on the fraction of a layer's original filters that may go.
    pub max_layer_rate: f64,
    /// FLOPs fraction removed between two recovery fine-tunes.
    pub finetune_interval: f64,
    pub finetune_epochs: usize,
    pub probe_size: usize,
    pub balanced_probe: bool,
    pub seed: u64,
    pub criteria: Vec<Criterion>,
    pub step_mode: StepMode,
    pub cosine_form: CosineForm,
    /// Skip candidates overshooting `target + 2·step` while others fit.
    pub overshoot_guard: bool,
    /// Memory for cached probe activations shared by candidate evaluations.
    pub probe_cache_mb: usize,
    /// Allow pruning at or after the first decay milestone.
    pub late_prune_ok: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Decay points as fractions of `max_epochs`.
    pub lr_decay_at: Vec<f64>,
    pub lr_gamma: f64,
    pub augment: bool,
    pub crop_padding: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prune_epoch: None,
            max_epochs: 160,
            target_rate: 0.5,
            step_rate: 0.01,
            max_layer_rate: 0.7,
            finetune_interval: 0.03,
            finetune_epochs: 1,
            probe_size: 1024,
            balanced_probe: false,
            seed: 0,
            criteria: Criterion::ALL.to_vec(),
            step_mode: StepMode::Measured,
            cosine_form: CosineForm::Normalized,
            overshoot_guard: true,
            probe_cache_mb: 512,
            late_prune_ok: false,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            eval_batch_size: 500,
            lr_decay_at: vec![0.5, 0.75],
            lr_gamma: 0.1,
            augment: true,
            crop_padding: 4,
        }
    }
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
    }
    Ok(())
}

impl RunConfig {
    pub fn pruning_enabled(&self) -> bool {
        self.target_rate > 0.0
    }

    /// Checks every invariant. A zero target rate turns the run into plain
    /// training and skips the pruning-specific checks.
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!("lr_gamma = {} must lie in (0, 1]", self.lr_gamma)));
        }
        let mut last = 0.0;
        for &f in &self.lr_decay_at {
            if !(f > last && f < 1.0) {
                return Err(Error::Config("lr_decay_at must be increasing fractions in (0, 1)".into()));
            }
            last = f;
        }
        let schedule = self.schedule();
        if schedule.prune_epoch >= self.max_epochs {
            return Err(Error::Config(format!(
                "prune epoch {} must precede max_epochs {}",
                schedule.prune_epoch, self.max_epochs
            )));
        }
        if !self.pruning_enabled() {
            if self.target_rate < 0.0 {
                return Err(Error::Config("target_rate must not be negative".into()));
            }
            return Ok(());
        }
        fraction("target_rate", self.target_rate)?;
        fraction("step_rate", self.step_rate)?;
        fraction("max_layer_rate", self.max_layer_rate)?;
        fraction("finetune_interval", self.finetune_interval)?;
        if self.step_rate >= self.finetune_interval {
            return Err(Error::Config(format!(
                "step_rate {} must be below finetune_interval {}",
                self.step_rate, self.finetune_interval
            )));
        }
        if self.finetune_interval > self.target_rate {
            return Err(Error::Config(format!(
                "finetune_interval {} must not exceed target_rate {}",
                self.finetune_interval, self.target_rate
            )));
        }
        if self.finetune_epochs == 0 {
            return Err(Error::Config("finetune_epochs must be at least 1".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size must be at least 1".into()));
        }
        validate_pool(&self.criteria)?;
        if !self.late_prune_ok {
            if let Some(&m) = schedule.milestones.first() {
                if schedule.prune_epoch >= m {
                    return Err(Error::Config(format!(
                        "prune epoch {} is not before the first lr decay at epoch {m} (set late_prune_ok to allow)",
                        schedule.prune_epoch
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> TrainSchedule {
        let milestones: Vec<usize> =
            self.lr_decay_at.iter().map(|f| ((f * self.max_epochs as f64).round() as usize).max(1)).collect();
        let default_prune = milestones.first().map(|m| m - 1).unwrap_or(self.max_epochs / 2);
        TrainSchedule {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones,
            gamma: self.lr_gamma,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            prune_epoch: self.prune_epoch.unwrap_or(default_prune),
            max_epochs: self.max_epochs,
            augment: self.augment,
            crop_padding: self.crop_padding,
        }
    }
}

/// SGD with momentum, weight decay and a piecewise-constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub prune_epoch: usize,
    pub max_epochs: usize,
    pub augment: bool,
    pub crop_padding: usize,
}

impl TrainSchedule {
    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(decays as i32)
    }

    /// Rate for recovery fine-tunes: the schedule's rate at the prune epoch.
    pub fn finetune_lr(&self) -> f64 {
        self.lr_at(self.prune_epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = c.schedule();
        assert_eq!(s.milestones, vec![80, 120]);
        assert_eq!(s.prune_epoch, 79);
        assert_eq!(s.lr_at(79), 0.1);
        assert!((s.lr_at(80) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(159) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn invariant_violations() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.step_rate = 0.6));
        assert!(bad(|c| c.step_rate = 0.03));
        assert!(bad(|c| c.finetune_interval = 0.6));
        assert!(bad(|c| c.max_layer_rate = 1.0));
        assert!(bad(|c| c.prune_epoch = Some(80)));
        assert!(bad(|c| c.prune_epoch = Some(160)));
        assert!(bad(|c| c.finetune_epochs = 0));
        assert!(bad(|c| c.probe_size = 0));
        assert!(bad(|c| c.criteria = vec![]));
        assert!(bad(|c| c.criteria = vec![Criterion::L1, Criterion::L1]));
        assert!(!bad(|c| {
            c.prune_epoch = Some(100);
            c.late_prune_ok = true;
        }));
    }

    #[test]
    fn zero_target_is_plain_training() {
        let c = RunConfig { target_rate: 0.0, step_rate: 0.9, ..RunConfig::default() };
        c.validate().unwrap();
        assert!(!c.pruning_enabled());
    }

    #[test]
    fn toml_like_partial_json() {
        let c: RunConfig = serde_json::from_str(r#"{"target_rate":0.3,"criteria":["l1","cos"]}"#).unwrap();
        assert_eq!(c.target_rate, 0.3);
        assert_eq!(c.criteria, vec![Criterion::L1, Criterion::Cos]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }
}
