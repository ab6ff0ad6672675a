#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smokeforge::corpus::BinaryMask;
use smokeforge::diffusion::{
    ConditioningBundle, LatentBatch, NoiseSchedule, Space, ToyDenoiser, ToyDenoiserConfig,
    ToyTextEncoder,
};
use smokeforge::injection::{extract_features, masked_image, ToyExtractor, ToyExtractorConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

pub fn toy_denoiser() -> ToyDenoiser {
    ToyDenoiser::new(
        ToyDenoiserConfig::default(),
        NoiseSchedule::cosine(100).unwrap(),
    )
    .unwrap()
}

pub fn toy_extractor() -> ToyExtractor {
    ToyExtractor::new(ToyExtractorConfig::default()).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize) -> BinaryMask {
    let x0 = rng.random_range(0..w - 1);
    let y0 = rng.random_range(0..h - 1);
    let mw = rng.random_range(1..=w - x0);
    let mh = rng.random_range(1..=h - y0);
    BinaryMask::from_rect(w, h, x0, y0, mw, mh)
}

/// Random images, masks and captions turned into a full conditioning bundle
/// for the 8×8×3 toy backbone.
pub fn random_cond(rng: &mut impl Rng, batch: usize) -> ConditioningBundle {
    let extractor = toy_extractor();
    let encoder = ToyTextEncoder::new(8, 0);
    let mut masks = Vec::new();
    let mut masked = Vec::new();
    let mut features = Vec::new();
    let mut text = Vec::new();
    for i in 0..batch {
        let img = Array3::from_shape_simple_fn((3, 8, 8), || rng.random_range(-1.0..1.0));
        let m = random_mask(rng, 8, 8);
        let mi = masked_image(img.view(), &m).unwrap();
        features.push(extract_features(&m, mi.view(), &extractor).unwrap());
        masks.push(m);
        masked.push(mi);
        text.push(encoder.encode(&format!("smoke plume number {i}")));
    }
    ConditioningBundle {
        text,
        masks,
        masked_image: LatentBatch::from_samples(&masked, Space::Latent).unwrap(),
        features,
    }
}
