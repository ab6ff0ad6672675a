use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::config::AdamWConfig;
use crate::error::{Error, Result};
use crate::tape::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every tensor of `params` that has an entry in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name}")))?;
            if p.dim() != g.dim() {
                return Err(Error::config(format!("gradient shape mismatch for {name}")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
        Ok(())
    }
}
