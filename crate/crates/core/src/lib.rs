//! Synthetic forest-fire smoke dataset factory.
//!
//! The crate covers the whole path from annotated detection data to an
//! auto-labelled synthetic detection dataset:
//!
//! * [`corpus`]: sample records, manifests, masks, YOLO export, mixing
//! * [`prep`]: building (image, mask, caption) triples with model clients
//! * [`diffusion`]: noise schedules, noising, the deterministic reverse step,
//!   guided sampling and the denoiser abstraction
//! * [`injection`]: mask / masked-image feature adapters fused by cross-attention
//! * [`mrd`]: morphology and the mask random difference loss
//! * [`trainer`]: adapter training over a frozen backbone
//! * [`generator`]: batch smoke synthesis into backgrounds
//! * [`filter`]: weighted multimodal scoring and top-fraction selection
//! * [`evalkit`]: PSNR / SSIM / MSE and client-backed metrics

pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod filter;
pub mod generator;
pub mod injection;
pub mod mrd;
pub mod prep;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
