//! The noise-prediction network abstraction and its conditioning inputs.

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::latent::LatentBatch;
use crate::corpus::BinaryMask;
use crate::error::{Error, Result};
use crate::injection::FeatureBundle;
use crate::tape::{ParamStore, ParamVars, Tape, Var};

/// A position between denoiser stages where adapters may rewrite activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub id: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TapPoint {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Everything the denoiser is conditioned on, for a whole batch.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// Per-sample text token embeddings (`L×E`, `L` may be zero).
    pub text: Vec<Array2<f64>>,
    /// Per-sample masks at latent resolution.
    pub masks: Vec<BinaryMask>,
    pub masked_image: LatentBatch,
    /// Per-sample extractor features; empty when no adapters are attached.
    pub features: Vec<FeatureBundle>,
}

impl ConditioningBundle {
    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.masks.len();
        if self.text.len() != b || self.masked_image.batch() != b {
            return Err(Error::invalid(format!(
                "conditioning batch sizes differ: text {}, masks {b}, masked image {}",
                self.text.len(),
                self.masked_image.batch()
            )));
        }
        if !self.features.is_empty() && self.features.len() != b {
            return Err(Error::invalid("feature bundle count differs from batch"));
        }
        let (_, _, h, w) = self.masked_image.shape();
        if self.masks.iter().any(|m| m.dims() != (w, h)) {
            return Err(Error::invalid(
                "mask resolution differs from masked-image latent",
            ));
        }
        Ok(())
    }

    /// Same image conditions, with the text replaced by `text`.
    pub fn with_text(&self, text: Vec<Array2<f64>>) -> Self {
        Self {
            text,
            ..self.clone()
        }
    }

    pub fn sample(&self, b: usize) -> SampleCond<'_> {
        SampleCond {
            text: &self.text[b],
            mask: &self.masks[b],
            masked_latent: self.masked_image.sample(b),
            features: self.features.get(b),
        }
    }
}

/// Conditioning for one sample of a batch.
#[derive(Debug, Clone, Copy)]
pub struct SampleCond<'a> {
    pub text: &'a Array2<f64>,
    pub mask: &'a BinaryMask,
    pub masked_latent: ArrayView3<'a, f64>,
    pub features: Option<&'a FeatureBundle>,
}

/// Called with each tap activation (tokens × channels); returns the
/// activation that feeds the next stage.
pub trait TapHook {
    fn at_tap(&mut self, tape: &Tape, tap: usize, x: Var) -> Result<Var>;
}

/// Leaves every tap untouched.
pub struct NoHook;

impl TapHook for NoHook {
    fn at_tap(&mut self, _tape: &Tape, _tap: usize, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// A differentiable noise-prediction network with declared tap points.
///
/// `forward` runs one sample on a tape: `x_t` is a `(H·W)×C` token matrix and
/// the result has the same shape. Backbone weights come from `params`, bound
/// from [`Denoiser::params`].
pub trait Denoiser {
    fn tap_points(&self) -> &[TapPoint];

    /// `(channels, height, width)` of the latents this denoiser accepts.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn forward(
        &self,
        tape: &Tape,
        params: &ParamVars,
        x_t: Var,
        t: usize,
        cond: &SampleCond<'_>,
        hook: &mut dyn TapHook,
    ) -> Result<Var>;
}

/// Caption to token embeddings (`L×E`; the empty prompt may give `0×E`).
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, caption: &str) -> Array2<f64>;

    /// Named weights, for freeze auditing.
    fn params(&self) -> ParamStore {
        ParamStore::new()
    }
}

/// Anything that maps a noisy batch to predicted noise.
pub trait NoisePredictor {
    fn predict(
        &self,
        x_t: &LatentBatch,
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<LatentBatch>;
}

/// Runs `denoiser` over a batch, building a hook per sample.
pub fn predict_batch<'h, D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &LatentBatch,
    t: usize,
    cond: &ConditioningBundle,
    mut make_hook: impl FnMut(&Tape, usize) -> Result<Box<dyn TapHook + 'h>>,
) -> Result<LatentBatch> {
    cond.validate()?;
    let (b, c, h, w) = x_t.shape();
    if (c, h, w) != denoiser.latent_shape() {
        return Err(Error::invalid(format!(
            "latent {:?} does not match denoiser {:?}",
            (c, h, w),
            denoiser.latent_shape()
        )));
    }
    if cond.batch() != b {
        return Err(Error::invalid(
            "conditioning batch differs from latent batch",
        ));
    }
    let mut out = x_t.clone();
    for i in 0..b {
        let tape = Tape::new();
        let params = ParamVars::bind(&tape, denoiser.params());
        let x = tape.leaf(x_t.tokens(i));
        let mut hook = make_hook(&tape, i)?;
        let eps = denoiser.forward(&tape, &params, x, t, &cond.sample(i), hook.as_mut())?;
        if tape.shape(eps) != tape.shape(x) {
            return Err(Error::invalid("denoiser output shape differs from input"));
        }
        out.set_tokens(i, &tape.value(eps));
    }
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("denoiser output at t={t}")));
    }
    Ok(out)
}

/// A denoiser used without adapters.
pub struct Plain<'a, D: ?Sized>(pub &'a D);

impl<D: Denoiser + ?Sized> NoisePredictor for Plain<'_, D> {
    fn predict(
        &self,
        x_t: &LatentBatch,
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<LatentBatch> {
        predict_batch(self.0, x_t, t, cond, |_, _| Ok(Box::new(NoHook)))
    }
}
