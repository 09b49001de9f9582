use crate::error::{BarError, Result};
use crate::masking::RatioStrategy;
use crate::model::{parse_field, LossSupport};

use super::optim::AdamWConfig;
use super::schedule::warmup_cosine;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub end_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Probability that a sequence is trained with the null class.
    pub class_dropout: f64,
    pub mask_strategy: RatioStrategy,
    pub loss_support: LossSupport,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            end_learning_rate: 1e-5,
            weight_decay: 0.03,
            beta1: 0.9,
            beta2: 0.96,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 50,
            warmup_epochs: 5,
            grad_clip_norm: 1.0,
            seed: 0,
            class_dropout: 0.1,
            mask_strategy: RatioStrategy::default(),
            loss_support: LossSupport::Masked,
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe. Documented for reference; far too large for
    /// the desk-scale tasks in this crate.
    pub fn full_scale() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            end_learning_rate: 1e-5,
            batch_size: 2048,
            epochs: 400,
            warmup_epochs: 100,
            ..TrainConfig::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |field: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(BarError::config(field, format!("must lie in (0, 1), got {v}")))
            }
        };
        open_unit("beta1", self.beta1)?;
        open_unit("beta2", self.beta2)?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(BarError::config("learning_rate", "must be positive"));
        }
        if !(self.end_learning_rate >= 0.0) {
            return Err(BarError::config("end_learning_rate", "must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(BarError::config("weight_decay", "must be non-negative"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(BarError::config("adam_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(BarError::config("batch_size", "must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(BarError::config("warmup_epochs", "cannot exceed epochs"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(BarError::config("grad_clip_norm", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return Err(BarError::config("class_dropout", "must lie in [0, 1]"));
        }
        self.mask_strategy
            .validate()
            .map_err(|e| BarError::config("mask_sigma", e.to_string()))
    }

    pub const KEYS: [&'static str; 16] = [
        "learning_rate",
        "end_learning_rate",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "epochs",
        "warmup_epochs",
        "grad_clip_norm",
        "seed",
        "class_dropout",
        "mask_strategy",
        "mask_mu",
        "mask_sigma",
        "loss_support",
    ];

    /// Sets one field by its config key; `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_field(key, value)?,
            "end_learning_rate" => self.end_learning_rate = parse_field(key, value)?,
            "weight_decay" => self.weight_decay = parse_field(key, value)?,
            "beta1" => self.beta1 = parse_field(key, value)?,
            "beta2" => self.beta2 = parse_field(key, value)?,
            "adam_eps" => self.adam_eps = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "epochs" => self.epochs = parse_field(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_field(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            "class_dropout" => self.class_dropout = parse_field(key, value)?,
            "mask_strategy" => {
                let (mu, sigma) = match self.mask_strategy {
                    RatioStrategy::LogitNormal { mu, sigma } => (mu, sigma),
                    _ => (0.0, 1.0),
                };
                self.mask_strategy = match value.trim().parse()? {
                    RatioStrategy::LogitNormal { .. } => RatioStrategy::LogitNormal { mu, sigma },
                    other => other,
                };
            }
            "mask_mu" | "mask_sigma" => {
                let v: f64 = parse_field(key, value)?;
                if let RatioStrategy::LogitNormal { mu, sigma } = &mut self.mask_strategy {
                    *(if key == "mask_mu" { mu } else { sigma }) = v;
                } else {
                    return Err(BarError::config(key, "only applies to mask_strategy=logit_normal"));
                }
            }
            "loss_support" => self.loss_support = value.trim().parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Linear warmup from 0 to the peak rate over the warmup share of the
/// steps, then cosine decay to the end rate.
pub fn lr_at(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    let warmup = if cfg.epochs == 0 {
        0
    } else {
        (total_steps as f64 * cfg.warmup_epochs as f64 / cfg.epochs as f64).round() as u64
    };
    warmup_cosine(cfg.learning_rate, cfg.end_learning_rate, warmup, step, total_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::full_scale();
        let total = 400 * 10;
        assert_eq!(lr_at(&cfg, 0, total), 0.0);
        assert_eq!(lr_at(&cfg, 1000, total), 4e-4);
        assert_eq!(lr_at(&cfg, total, total), 1e-5);
        let desk = TrainConfig::default();
        assert_eq!(lr_at(&desk, 500, 5000), 3e-4);
    }

    #[test]
    fn validation_names_fields() {
        let bad = TrainConfig { beta2: 1.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(BarError::Config { field, .. }) if field == "beta2"));
        let bad = TrainConfig { warmup_epochs: 60, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(BarError::Config { field, .. }) if field == "warmup_epochs"));
        let bad = TrainConfig { grad_clip_norm: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn keys_round_trip_through_set() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("mask_strategy", "logit_normal").unwrap());
        assert!(cfg.set("mask_sigma", "2.0").unwrap());
        assert_eq!(cfg.mask_strategy, RatioStrategy::LogitNormal { mu: 0.0, sigma: 2.0 });
        assert!(cfg.set("mask_strategy", "arccos").unwrap());
        assert!(cfg.set("mask_mu", "1").is_err());
        assert!(!cfg.set("width", "3").unwrap());
        assert!(cfg.set("epochs", "x").is_err());
    }
}
