//! Noise schedules, forward noising, the deterministic reverse update, the
//! base objective, guided sampling and the denoiser abstraction.

mod denoiser;
mod latent;
mod ops;
mod sampler;
mod schedule;
pub mod toy;

pub use denoiser::{
    predict_batch, ConditioningBundle, Denoiser, NoHook, NoisePredictor, Plain, SampleCond,
    TapHook, TapPoint, TextEncoder,
};
pub use latent::{array_to_rgb, grid_to_tokens, rgb_to_array, tokens_to_grid, LatentBatch, Space};
pub use ops::{add_noise, add_noise_with_alpha, base_loss, ddim_update, reverse_step};
pub use sampler::{
    guided_eps, sample_cfg, strided_timesteps, SamplerConfig, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
pub use schedule::NoiseSchedule;
pub use toy::{
    Autoencoder, AvgPoolAutoencoder, IdentityAutoencoder, ToyDenoiser, ToyDenoiserConfig,
    ToyTextEncoder,
};
