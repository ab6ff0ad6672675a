//! Desk-scale training task: bright blobs on a dim background.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, TrainExample};
use super::config::TrainConfig;
use super::freeze::FreezePolicy;
use super::run::{run_training, ResumeMode, TrainSummary};
use crate::corpus::BinaryMask;
use crate::error::Result;
use crate::injection::{default_schedule, AdapterConfig, AdapterSet};
use crate::mrd::MrdConfig;

pub const BLOB_INTENSITY: f64 = 0.9;
pub const BACKGROUND_INTENSITY: f64 = 0.2;
pub const TOY_SCHEDULE_STEPS: usize = 100;
pub const TOY_CAPTION: &str = "a forest with smoke";
pub const TOY_DATASET_SIZE: usize = 256;

/// Random elliptical mask of radius 1.5..3.5 px somewhere in a `size×size` grid.
pub fn random_blob_mask(size: usize, rng: &mut impl Rng) -> BinaryMask {
    loop {
        let cx = rng.random_range(1.5..size as f64 - 1.5);
        let cy = rng.random_range(1.5..size as f64 - 1.5);
        let rx = rng.random_range(1.5..3.5);
        let ry = rng.random_range(1.5..3.5);
        let m = BinaryMask::from_fn(size, size, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        });
        if m.count_ones() >= 3 && m.count_ones() < size * size / 2 {
            return m;
        }
    }
}

/// `3×size×size` image in `[-1, 1]`: intensity ≈0.9 inside `mask`, ≈0.2 elsewhere.
pub fn blob_image(mask: &BinaryMask, rng: &mut impl Rng) -> Array3<f64> {
    let (w, h) = mask.dims();
    let mut img = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = if mask.get(x, y) {
                BLOB_INTENSITY
            } else {
                BACKGROUND_INTENSITY
            };
            let v: f64 = base + rng.random_range(-0.03..0.03);
            for c in 0..3 {
                img[[c, y, x]] = 2.0 * v.clamp(0.0, 1.0) - 1.0;
            }
        }
    }
    img
}

pub fn blob_dataset(n: usize, size: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mask = random_blob_mask(size, &mut rng);
            let image = blob_image(&mask, &mut rng);
            TrainExample {
                id: format!("blob-{i:04}"),
                image,
                mask,
                caption: TOY_CAPTION.into(),
            }
        })
        .collect()
}

/// Mean `[0, 1]` intensity inside and outside `mask`.
pub fn region_means(image: &Array3<f64>, mask: &BinaryMask) -> (f64, f64) {
    let (c, h, w) = image.dim();
    let (mut inside, mut outside, mut n_in, mut n_out) = (0.0, 0.0, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = (0..c)
                .map(|ch| (image[[ch, y, x]] + 1.0) / 2.0)
                .sum::<f64>()
                / c as f64;
            if mask.get(x, y) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
}

/// Settings for the blob task: kernels scaled to 8-pixel images and a
/// learning rate suited to a few hundred steps.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        batch_size: 8,
        max_iters: 300,
        checkpoint_every: 100,
        mrd: MrdConfig {
            kernel_min: 1,
            kernel_max: 3,
            ..MrdConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Trains default adapters on the blob task from scratch.
pub fn train_blob_adapters(cfg: &TrainConfig, out_dir: &Path) -> Result<(Backbone, TrainSummary)> {
    let mut backbone = Backbone::toy(TOY_SCHEDULE_STEPS, 0)?;
    let data = blob_dataset(TOY_DATASET_SIZE, 8, 1);
    let adapters = AdapterSet::init(
        default_schedule(),
        backbone.denoiser.tap_points(),
        AdapterConfig::default(),
    )?;
    let summary = run_training(
        &mut backbone,
        adapters,
        &data,
        cfg,
        &FreezePolicy::default(),
        out_dir,
        ResumeMode::Restart,
    )?;
    Ok((backbone, summary))
}
