use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::backbone::{Backbone, TrainExample};
use super::config::TrainConfig;
use super::freeze::FreezePolicy;
use super::optim::AdamW;
use crate::corpus::BinaryMask;
use crate::diffusion::SampleCond;
use crate::error::{Error, Result};
use crate::injection::{AdapterHook, AdapterSet};
use crate::mrd::{downsample_mask, mask_tokens, perturb_mask, total_loss_var, MrdConfig};
use crate::tape::{ParamStore, ParamVars, Tape};

/// Random quantities drawn for one training sample.
#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub t: usize,
    /// `(H·W)×C` latent noise.
    pub eps: Array2<f64>,
    /// Perturbed mask at latent resolution.
    pub m_prime: BinaryMask,
}

/// Draws `t ~ U{1..T}`, Gaussian noise and a perturbed mask, in that order.
pub fn draw_sample(
    backbone: &Backbone,
    pixel_mask: &BinaryMask,
    mrd: &MrdConfig,
    rng: &mut impl Rng,
) -> Result<SampleDraw> {
    let (c, h, w) = backbone.denoiser.latent_shape();
    let t = rng.random_range(1..=backbone.schedule.steps());
    let eps = Array2::from_shape_simple_fn((h * w, c), || rng.sample(StandardNormal));
    let perturbed = perturb_mask(pixel_mask, mrd, rng)?;
    let m_prime = downsample_mask(&perturbed.bits, backbone.autoencoder.downsample_factor())?;
    Ok(SampleDraw { t, eps, m_prime })
}

#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub loss: f64,
    /// Masked MSE term before weighting.
    pub masked_mse: f64,
    /// Plain MSE term before weighting.
    pub base_mse: f64,
    /// Gradients for every backbone and adapter tensor.
    pub grads: ParamStore,
}

/// Loss and gradients for one sample with clean latent tokens `x0`.
pub fn sample_loss(
    backbone: &Backbone,
    adapters: &AdapterSet,
    x0: &Array2<f64>,
    cond: &SampleCond<'_>,
    draw: &SampleDraw,
    omega: f64,
) -> Result<SampleLoss> {
    let alpha = backbone.schedule.alpha(draw.t)?;
    let x_t = x0 * alpha.sqrt() + &draw.eps * (1.0 - alpha).sqrt();
    let tape = Tape::new();
    let den_vars = ParamVars::bind(&tape, backbone.denoiser.params());
    let ad_vars = ParamVars::bind(&tape, &adapters.params);
    let mut hook = AdapterHook::new(&tape, adapters, ad_vars.clone(), cond.features);
    let x = tape.leaf(x_t);
    let eps_pred = backbone
        .denoiser
        .forward(&tape, &den_vars, x, draw.t, cond, &mut hook)?;
    let eps = tape.leaf(draw.eps.clone());
    let mask = mask_tokens(&draw.m_prime, draw.eps.ncols());
    let loss = total_loss_var(&tape, eps, eps_pred, &mask, omega)?;
    let grads = tape.backward(loss)?;

    let pred = tape.value(eps_pred);
    let n = pred.len() as f64;
    let diff = &draw.eps - &pred;
    let base_mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let masked_mse = diff
        .iter()
        .zip(mask.iter())
        .map(|(d, m)| d * d * m)
        .sum::<f64>()
        / n;

    let mut out = ParamStore::new();
    for (name, var) in den_vars.iter().chain(ad_vars.iter()) {
        if let Some(g) = grads.get(*var) {
            out.insert(name.clone(), g.clone());
        }
    }
    Ok(SampleLoss {
        loss: tape.scalar(loss),
        masked_mse,
        base_mse,
        grads: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// `ω·masked` contribution.
    pub omega_term: f64,
    /// `(1-ω)·base` contribution.
    pub base_term: f64,
    pub timesteps: Vec<usize>,
}

/// One optimizer step on the batch-mean loss; only policy-trainable tensors move.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    backbone: &mut Backbone,
    adapters: &mut AdapterSet,
    opt: &mut AdamW,
    policy: &FreezePolicy,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let images: Vec<_> = batch.iter().map(|e| e.image.clone()).collect();
    let masks: Vec<_> = batch.iter().map(|e| e.mask.clone()).collect();
    let captions: Vec<_> = batch.iter().map(|e| e.caption.clone()).collect();
    let (x0, cond) = backbone.condition(&images, &masks, &captions)?;

    let omega = cfg.mrd.omega;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamStore::new();
    let mut stats = StepStats {
        loss: 0.0,
        omega_term: 0.0,
        base_term: 0.0,
        timesteps: Vec::with_capacity(batch.len()),
    };
    for (i, ex) in batch.iter().enumerate() {
        let draw = draw_sample(backbone, &ex.mask, &cfg.mrd, rng)?;
        let s = sample_loss(
            backbone,
            adapters,
            &x0.tokens(i),
            &cond.sample(i),
            &draw,
            omega,
        )?;
        if !s.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss for sample {} at t={}",
                ex.id, draw.t
            )));
        }
        stats.loss += s.loss * scale;
        stats.omega_term += omega * s.masked_mse * scale;
        stats.base_term += (1.0 - omega) * s.base_mse * scale;
        stats.timesteps.push(draw.t);
        for (name, g) in s.grads {
            match grads.get_mut(&name) {
                Some(acc) => *acc += &(g * scale),
                None => {
                    grads.insert(name, g * scale);
                }
            }
        }
    }

    let backbone_names: Vec<String> = backbone.params().into_keys().collect();
    let trainable = policy.trainable_names(backbone_names.iter().chain(adapters.params.keys()))?;
    let mut params = ParamStore::new();
    let mut step_grads = ParamStore::new();
    for name in &trainable {
        let Some(g) = grads.remove(name) else {
            continue;
        };
        let p = adapters
            .params
            .get(name)
            .or_else(|| backbone.denoiser.params().get(name))
            .ok_or_else(|| Error::config(format!("{name} is trainable but not updatable")))?;
        params.insert(name.clone(), p.clone());
        step_grads.insert(name.clone(), g);
    }
    opt.update(&mut params, &step_grads, lr)?;
    for (name, p) in params {
        if let Some(slot) = adapters.params.get_mut(&name) {
            *slot = p;
        } else if let Some(slot) = backbone.denoiser.params_mut().get_mut(&name) {
            *slot = p;
        }
    }
    Ok(stats)
}
