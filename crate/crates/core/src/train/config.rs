use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the two BCE terms are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_c = N / (2 N_c)` from the training partition.
    InverseFrequency,
    Uniform,
}

fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    2
}
fn default_lr() -> f64 {
    8e-6
}
fn default_lr_decay() -> f64 {
    0.95
}
fn default_lr_interval() -> u64 {
    100
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_dropout() -> f64 {
    0.7
}
fn default_weighting() -> Weighting {
    Weighting::InverseFrequency
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Staircase factor applied every `lr_decay_interval` optimizer steps.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_interval")]
    pub lr_decay_interval: u64,
    /// Decoupled AdamW coefficient.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Copied into the model config by front ends.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            lr_decay: default_lr_decay(),
            lr_decay_interval: default_lr_interval(),
            weight_decay: default_weight_decay(),
            dropout: default_dropout(),
            weighting: default_weighting(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return fail("lr_decay", format!("must be positive, got {}", self.lr_decay));
        }
        if self.lr_decay_interval == 0 {
            return fail("lr_decay_interval", "must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Staircase schedule: `lr * decay^(step / interval)`.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    config.lr * config.lr_decay.powi((step / config.lr_decay_interval) as i32)
}
