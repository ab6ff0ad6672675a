use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ParamStore;

/// Splits parameters into trainable and frozen sets by name prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            trainable: vec!["tap".into()],
            frozen: ["unet.", "vae.", "text_encoder.", "extractor."]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl FreezePolicy {
    /// Whether `name` is trainable. A name must match exactly one set.
    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        let t = self.trainable.iter().any(|p| name.starts_with(p.as_str()));
        let f = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        match (t, f) {
            (true, false) => Ok(true),
            (false, true) => Ok(false),
            (true, true) => Err(Error::config(format!(
                "{name} is both trainable and frozen"
            ))),
            (false, false) => Err(Error::config(format!(
                "{name} is not covered by the freeze policy"
            ))),
        }
    }

    /// Checks that every name is classified and returns the trainable ones.
    pub fn trainable_names<'a>(
        &self,
        names: impl IntoIterator<Item = &'a String>,
    ) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for n in names {
            if self.is_trainable(n)? {
                out.push(n.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub frozen_checked: usize,
    pub trainable_checked: usize,
    /// Frozen tensors that changed.
    pub drifted: Vec<String>,
    pub trainable_changed: Vec<String>,
    /// Tensors present on only one side.
    pub missing: Vec<String>,
}

impl FreezeReport {
    /// No trainable tensor moved.
    pub fn no_op_training(&self) -> bool {
        self.trainable_changed.is_empty()
    }

    pub fn is_ok(&self) -> bool {
        self.drifted.is_empty() && self.missing.is_empty() && !self.no_op_training()
    }
}

impl fmt::Display for FreezeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} frozen tensors checked, {} trainable ({} changed)",
            self.frozen_checked,
            self.trainable_checked,
            self.trainable_changed.len()
        )?;
        if !self.drifted.is_empty() {
            write!(f, "; frozen tensors drifted: {}", self.drifted.join(", "))?;
        }
        if !self.missing.is_empty() {
            write!(
                f,
                "; tensors missing on one side: {}",
                self.missing.join(", ")
            )?;
        }
        if self.no_op_training() {
            write!(f, "; no-op training")?;
        }
        Ok(())
    }
}

/// Compares parameter snapshots taken before and after training.
pub fn verify_freeze(
    before: &ParamStore,
    after: &ParamStore,
    policy: &FreezePolicy,
) -> Result<FreezeReport> {
    let mut report = FreezeReport::default();
    for (name, old) in before {
        let Some(new) = after.get(name) else {
            report.missing.push(name.clone());
            continue;
        };
        // Bitwise comparison: -0.0 vs 0.0 or NaN payloads count as changes.
        let same = old.dim() == new.dim()
            && old
                .iter()
                .zip(new.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if policy.is_trainable(name)? {
            report.trainable_checked += 1;
            if !same {
                report.trainable_changed.push(name.clone());
            }
        } else {
            report.frozen_checked += 1;
            if !same {
                report.drifted.push(name.clone());
            }
        }
    }
    report
        .missing
        .extend(after.keys().filter(|k| !before.contains_key(*k)).cloned());
    Ok(report)
}
