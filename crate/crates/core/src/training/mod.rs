//! Joint CTC + cross-entropy optimization, the warmup schedule, checkpoint averaging and
//! causal-LM pretraining for decoder donors.

mod adam;
mod average;
mod lm;
mod trainer;

use std::fmt;

pub use adam::{clip_grad_norm, Adam, Grads};
pub use average::{average_checkpoint_files, average_checkpoints};
pub use lm::{perplexity, pretrain_lm, unigram_perplexity, LmOutcome};
pub use trainer::{batch_gradients, BatchGrads, TrainMode, TrainOutcome, Trainer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_ctc: f64,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Updates `1..=warm_phase_updates` train only the heads and cross layer(s).
    pub warm_phase_updates: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub avg_last_k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ctc: 0.3,
            warmup_steps: 400,
            peak_lr: 1e-3,
            warm_phase_updates: 200,
            max_epochs: 15,
            patience: 3,
            avg_last_k: 5,
            batch_size: 16,
            seed: 1,
            label_smoothing: 0.0,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    /// Schedule of the full-size recipe.
    pub fn full_scale() -> Self {
        Self {
            warmup_steps: 25_000,
            warm_phase_updates: 10_000,
            max_epochs: 20,
            patience: 3,
            avg_last_k: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::invalid(format!("lambda_ctc {} outside [0,1]", self.lambda_ctc)));
        }
        if self.warmup_steps == 0 || self.avg_last_k == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("warmup_steps, avg_last_k, batch_size and max_epochs must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!("label_smoothing {} outside [0,1)", self.label_smoothing)));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("peak_lr and grad_clip must be positive"));
        }
        Ok(())
    }
}

/// `λ·ctc + (1−λ)·ce`.
pub fn mtl_loss(ctc: f64, ce: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0,1]")));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    if lambda == 1.0 {
        return Ok(ctc);
    }
    Ok(lambda * ctc + (1.0 - lambda) * ce)
}

/// Inverse-square-root schedule with linear warmup, peaking at `peak_lr` when
/// `step == warmup_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * (s.powf(-0.5)).min(s * w.powf(-1.5)) * w.sqrt()
}

/// Stops after `patience` consecutive epochs without a new best validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            seen: 0,
        }
    }

    /// Records one epoch's validation loss; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.seen += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.seen;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.patience > 0 && self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub update: usize,
    pub train_mtl: f64,
    pub dev_mtl: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} update {} train_mtl {:.6} dev_mtl {:.6} lr {:.6e}",
            self.epoch, self.update, self.train_mtl, self.dev_mtl, self.lr
        )
    }
}

impl EpochRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 || f[0] != "epoch" || f[2] != "update" || f[4] != "train_mtl" || f[6] != "dev_mtl" || f[8] != "lr" {
            return None;
        }
        Some(Self {
            epoch: f[1].parse().ok()?,
            update: f[3].parse().ok()?,
            train_mtl: f[5].parse().ok()?,
            dev_mtl: f[7].parse().ok()?,
            lr: f[9].parse().ok()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtl_boundaries() {
        assert_eq!(mtl_loss(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(mtl_loss(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert!((mtl_loss(2.0, 1.0, 0.3).unwrap() - 1.3).abs() < 1e-15);
        assert!(mtl_loss(2.0, 1.0, 1.2).is_err());
        assert!(mtl_loss(2.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig::default();
        assert!((lr_at(400, &cfg) - 1e-3).abs() < 1e-18);
        assert!((lr_at(1600, &cfg) - 5e-4).abs() < 1e-18);
        for s in 1..400 {
            assert!(lr_at(s + 1, &cfg) >= lr_at(s, &cfg));
        }
        for s in 400..5000 {
            assert!(lr_at(s + 1, &cfg) <= lr_at(s, &cfg));
        }
    }

    #[test]
    fn patience_three() {
        let mut es = EarlyStopping::new(3);
        let stops: Vec<bool> = [5.0, 4.0, 4.1, 4.2, 4.3].iter().map(|&l| es.observe(l)).collect();
        assert_eq!(stops, vec![false, false, false, false, true]);
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn log_line_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            update: 375,
            train_mtl: 1.25,
            dev_mtl: 1.5,
            lr: 9.375e-4,
        };
        let s = r.to_string();
        assert!(s.starts_with("epoch 3 update 375 train_mtl "));
        assert_eq!(EpochRecord::parse(&s).unwrap(), r);
        assert!(EpochRecord::parse("epoch x").is_none());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_ctc: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::full_scale().avg_last_k, 10);
    }
}
