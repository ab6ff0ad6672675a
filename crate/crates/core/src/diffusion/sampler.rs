//! Deterministic strided sampling with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::denoiser::{ConditioningBundle, NoisePredictor};
use super::latent::{axpby, LatentBatch, Space};
use super::ops::ddim_update;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_STEPS: usize = 50;

/// `steps` timesteps spread uniformly over `1..=T`, descending, always
/// including `T` and (for `steps >= 2`) `1`.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!(
            "cannot take {steps} sampling steps from a {total}-step schedule"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|i| 1 + (span * i as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Clamp each clean-signal estimate to `[-c, c]` before stepping; for
    /// bounded spaces such as raw pixels.
    pub clip_sample: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
            clip_sample: None,
        }
    }
}

/// Guided noise estimate `eps_u + s·(eps_c - eps_u)`. Scales 0 and 1 return
/// the unconditional and conditional branch verbatim and skip the other call.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x: &LatentBatch,
    t: usize,
    cond: &ConditioningBundle,
    uncond: &ConditioningBundle,
    guidance: f64,
) -> Result<LatentBatch> {
    if guidance == 0.0 {
        return predictor.predict(x, t, uncond);
    }
    if guidance == 1.0 {
        return predictor.predict(x, t, cond);
    }
    let eps_c = predictor.predict(x, t, cond)?;
    let eps_u = predictor.predict(x, t, uncond)?;
    axpby(1.0 - guidance, &eps_u, guidance, &eps_c)
}

/// Noise estimate consistent with the clean estimate clamped to `[-c, c]`.
fn clipped_eps(x: &LatentBatch, eps: &LatentBatch, alpha: f64, c: f64) -> Result<LatentBatch> {
    if alpha >= 1.0 {
        return Ok(eps.clone());
    }
    let (sa, sb) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let x0 = axpby(1.0 / sa, x, -sb / sa, eps)?;
    let x0 = LatentBatch {
        data: x0.data.mapv(|v| v.clamp(-c, c)),
        space: x0.space,
    };
    axpby(1.0 / sb, x, -sa / sb, &x0)
}

/// Samples latents of `shape` from seeded Gaussian noise.
///
/// Walks the strided timesteps with the deterministic update; the last step
/// goes to the clean signal level (alpha = 1).
pub fn sample_cfg<P: NoisePredictor + ?Sized>(
    predictor: &P,
    cond: &ConditioningBundle,
    uncond: &ConditioningBundle,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
    cfg: &SamplerConfig,
) -> Result<LatentBatch> {
    if cond.batch() != uncond.batch() || cond.masked_image.shape() != uncond.masked_image.shape() {
        return Err(Error::invalid("cond and uncond shapes differ"));
    }
    let ts = strided_timesteps(sched.steps(), cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = LatentBatch::randn(shape, Space::Latent, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(predictor, &x, t, cond, uncond, cfg.guidance).map_err(|e| {
            Error::Denoiser {
                step: t,
                source: Box::new(e),
            }
        })?;
        let alpha_prev = match ts.get(i + 1) {
            Some(&next) => sched.alpha(next)?,
            None => 1.0,
        };
        let alpha_t = sched.alpha(t)?;
        let eps = match cfg.clip_sample {
            Some(c) => clipped_eps(&x, &eps, alpha_t, c)?,
            None => eps,
        };
        x = ddim_update(&x, &eps, alpha_t, alpha_prev)?;
    }
    Ok(x)
}
