use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal coefficients `alpha[t-1]` for steps `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleJson", into = "ScheduleJson")]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleJson {
    #[serde(rename = "T")]
    steps: usize,
    alpha: Vec<f64>,
}

impl TryFrom<ScheduleJson> for NoiseSchedule {
    type Error = Error;
    fn try_from(j: ScheduleJson) -> Result<Self> {
        if j.steps != j.alpha.len() {
            return Err(Error::invalid(format!(
                "schedule declares T={} but has {} alphas",
                j.steps,
                j.alpha.len()
            )));
        }
        NoiseSchedule::new(j.alpha)
    }
}

impl From<NoiseSchedule> for ScheduleJson {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleJson {
            steps: s.alpha.len(),
            alpha: s.alpha,
        }
    }
}

const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Validates `alpha`: non-empty, every value in (0, 1], non-increasing.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::invalid(format!("alpha {a} outside (0, 1]")));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("alpha must be non-increasing"));
        }
        Ok(Self { alpha })
    }

    /// Squared-cosine schedule with offset 0.008; per-step betas clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        check_steps(steps)?;
        let s = 0.008;
        let f = |t: f64| {
            (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let betas =
            (1..=steps).map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(0.0, MAX_BETA));
        Self::new(cumulative(betas))
    }

    /// Linear betas from 1e-4 to 0.02, rescaled so the range matches a
    /// 1000-step schedule.
    pub fn linear(steps: usize) -> Result<Self> {
        check_steps(steps)?;
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas = (0..steps).map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            (lo + (hi - lo) * frac).min(MAX_BETA)
        });
        Self::new(cumulative(betas))
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t` for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.alpha.len() {
            return Err(Error::InvalidStep {
                t,
                steps: self.alpha.len(),
            });
        }
        Ok(self.alpha[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < 2 {
        return Err(Error::invalid(format!(
            "schedule needs T >= 2, got {steps}"
        )));
    }
    Ok(())
}

fn cumulative(betas: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_two_steps() {
        let s = NoiseSchedule::linear(2).unwrap();
        let a = s.alphas();
        assert!(a[1] < a[0]);
        assert!(a.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn cosine_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert!(s.alpha(1).unwrap() > 0.999);
        assert!(s.alpha(1000).unwrap() < 0.01);
        assert!(s.alpha(1000).unwrap() > 0.0);
    }

    #[test]
    fn monotone_for_many_lengths() {
        for t in [2, 3, 10, 50, 100, 1000] {
            for s in [
                NoiseSchedule::cosine(t).unwrap(),
                NoiseSchedule::linear(t).unwrap(),
            ] {
                assert!(s.alphas().windows(2).all(|w| w[1] <= w[0]));
                assert!(*s.alphas().last().unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn too_short_rejected() {
        assert!(NoiseSchedule::cosine(1).is_err());
        assert!(NoiseSchedule::linear(0).is_err());
        assert!(NoiseSchedule::new(vec![0.5, 0.6]).is_err());
        assert!(NoiseSchedule::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn step_bounds() {
        let s = NoiseSchedule::linear(10).unwrap();
        assert!(matches!(s.alpha(0), Err(Error::InvalidStep { .. })));
        assert!(s.alpha(11).is_err());
    }

    #[test]
    fn json_snapshot() {
        let s = NoiseSchedule::new(vec![0.9, 0.5]).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"T":2,"alpha":[0.9,0.5]}"#);
        let back: NoiseSchedule = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"T":3,"alpha":[0.9,0.5]}"#).is_err());
    }
}
