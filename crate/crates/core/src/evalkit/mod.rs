//! Image-quality and text-alignment metrics with JSON / CSV reports.

mod metrics;
mod report;

pub use metrics::{
    luminance, mse_img, psnr, ssim, ssim_map, SsimConfig, SsimWindow, MAX_INTENSITY,
};
pub use report::{
    clip_sim, evaluate_pairs, lpips, Aggregate, ClipClient, EvalClients, EvalConfig, EvalRegion,
    EvalReport, EvalRow, Exclusion, LpipsClient,
};
