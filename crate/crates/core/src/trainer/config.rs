use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrd::MrdConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Samples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum: usize,
    pub max_iters: usize,
    /// Linear warmup length; 0 keeps the rate constant.
    pub warmup_iters: usize,
    pub mrd: MrdConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            grad_accum: 1,
            max_iters: 20_000,
            warmup_iters: 0,
            mrd: MrdConfig::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate {} must be a non-negative number",
                self.learning_rate
            )));
        }
        if self.batch_size == 0
            || self.grad_accum == 0
            || self.max_iters == 0
            || self.checkpoint_every == 0
        {
            return Err(Error::config(
                "batch_size, grad_accum, max_iters and checkpoint_every must be positive",
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.eps <= 0.0
            || o.weight_decay < 0.0
        {
            return Err(Error::config("optimizer hyperparameters out of range"));
        }
        self.mrd.validate()
    }

    /// Learning rate at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.warmup_iters == 0 || iter >= self.warmup_iters {
            self.learning_rate
        } else {
            self.learning_rate * iter as f64 / self.warmup_iters as f64
        }
    }
}
