//! Score records and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_MAX: f64 = 10.0;

/// Weights for color, visibility and translucency, in tenths.
pub const WEIGHTS_TENTHS: [f64; 3] = [5.0, 3.0, 2.0];

fn check(name: &str, v: f64) -> Result<()> {
    if !(0.0..=SCORE_MAX).contains(&v) {
        return Err(Error::invalid(format!("{name} score {v} outside [0, 10]")));
    }
    Ok(())
}

/// `0.5·color + 0.3·visibility + 0.2·translucency`.
///
/// Evaluated as one sum over tenths, so integer scores give the correctly
/// rounded decimal (`(8, 6, 4)` is exactly `6.6`).
pub fn weighted_score(color: f64, visibility: f64, translucency: f64) -> Result<f64> {
    check("color", color)?;
    check("visibility", visibility)?;
    check("translucency", translucency)?;
    let [a, b, c] = WEIGHTS_TENTHS;
    Ok((a * color + b * visibility + c * translucency) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Human,
    Mllm,
    Mock,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub color: f64,
    pub visibility: f64,
    pub translucency: f64,
    pub weighted: f64,
    pub scorer: Scorer,
    /// Some component was outside `[0, 10]` and was clamped.
    #[serde(default, skip_serializing_if = "is_false")]
    pub clamped: bool,
    /// Scoring failed; the components are the `(0, 0, 0)` default.
    #[serde(default, skip_serializing_if = "is_false")]
    pub quarantined: bool,
}

impl ScoreRecord {
    pub fn new(
        sample_id: impl Into<String>,
        color: f64,
        visibility: f64,
        translucency: f64,
        scorer: Scorer,
    ) -> Result<Self> {
        Ok(Self {
            sample_id: sample_id.into(),
            color,
            visibility,
            translucency,
            weighted: weighted_score(color, visibility, translucency)?,
            scorer,
            clamped: false,
            quarantined: false,
        })
    }

    /// Clamps each component into `[0, 10]`, flagging the record if any moved.
    /// Non-finite components are rejected.
    pub fn clamped(sample_id: impl Into<String>, scores: [f64; 3], scorer: Scorer) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite score {scores:?}")));
        }
        let c = scores.map(|s| s.clamp(0.0, SCORE_MAX));
        let mut rec = Self::new(sample_id, c[0], c[1], c[2], scorer)?;
        rec.clamped = c != scores;
        Ok(rec)
    }

    pub fn failed(sample_id: impl Into<String>, scorer: Scorer) -> Self {
        Self {
            quarantined: true,
            ..Self::new(sample_id, 0.0, 0.0, 0.0, scorer).expect("zero scores are in range")
        }
    }

    /// Checks component bounds and the stored weighted total.
    pub fn validate(&self) -> Result<()> {
        let w = weighted_score(self.color, self.visibility, self.translucency)?;
        if (w - self.weighted).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "record {}: weighted {} does not match components ({w})",
                self.sample_id, self.weighted
            )));
        }
        Ok(())
    }
}
