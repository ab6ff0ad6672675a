//! Guided inpainting of smoke into background images.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::caption::CaptionRewriter;
use super::pairing::MaskPair;
use crate::corpus::{resolve, write_atomic, BinaryMask, Manifest, SmokeSample, Source, Split};
use crate::diffusion::{
    array_to_rgb, rgb_to_array, sample_cfg, SamplerConfig, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::injection::{attach_adapters, AdapterSet};
use crate::trainer::Backbone;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub guidance: f64,
    pub steps: usize,
    pub masks_per_background: usize,
    pub samples_per_pair: usize,
    pub seed: u64,
    /// `(width, height)` of written images; the backbone's native size when unset.
    pub output_resolution: Option<(usize, usize)>,
    pub clip_sample: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            guidance: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
            masks_per_background: 2,
            samples_per_pair: 3,
            seed: 0,
            output_resolution: None,
            clip_sample: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > schedule_steps {
            return Err(Error::config(format!(
                "steps must be in 1..={schedule_steps}, got {}",
                self.steps
            )));
        }
        if self.samples_per_pair == 0 {
            return Err(Error::config("samples_per_pair must be positive"));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::config(format!(
                "guidance must be finite and >= 0, got {}",
                self.guidance
            )));
        }
        if let Some((w, h)) = self.output_resolution {
            if w == 0 || h == 0 {
                return Err(Error::config("output resolution must be non-zero"));
            }
        }
        if let Some(c) = self.clip_sample {
            if !(c > 0.0) {
                return Err(Error::config("clip_sample must be positive"));
            }
        }
        Ok(())
    }
}

/// Sampler seed for one pair, independent of processing order.
pub fn pair_seed(seed: u64, pair_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in pair_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pastes `background` wherever `mask` is unset.
pub fn recompose(
    generated: &RgbImage,
    background: &RgbImage,
    mask: &BinaryMask,
) -> Result<RgbImage> {
    let (w, h) = generated.dimensions();
    if background.dimensions() != (w, h) || mask.dims() != (w as usize, h as usize) {
        return Err(Error::invalid(
            "generated image, background and mask sizes differ",
        ));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        if mask.get(x as usize, y as usize) {
            *generated.get_pixel(x, y)
        } else {
            *background.get_pixel(x, y)
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub pair_id: String,
    pub background_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub manifest: Manifest,
    pub quarantined: Vec<QuarantineEntry>,
}

fn resize_to(img: RgbImage, w: usize, h: usize) -> RgbImage {
    if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    }
}

/// Generates `samples_per_pair` images per pair into `out_dir`.
///
/// Writes `images/`, `masks/`, `manifest.jsonl` and `quarantine.jsonl`.
/// Background paths resolve against `base`. A failing pair is quarantined
/// and the batch continues.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch(
    pairs: &[MaskPair],
    pool: &[BinaryMask],
    backbone: &Backbone,
    adapters: &AdapterSet,
    rewriter: &CaptionRewriter,
    cfg: &GenConfig,
    base: &Path,
    out_dir: &Path,
) -> Result<GenerationReport> {
    cfg.validate(backbone.schedule.steps())?;
    let predictor = attach_adapters(backbone.denoiser.as_ref(), adapters)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut records = Vec::with_capacity(pairs.len() * cfg.samples_per_pair);
    let mut quarantined = Vec::new();
    for pair in pairs {
        let run = || -> Result<Vec<SmokeSample>> {
            let bg = image::open(resolve(base, &pair.background.image_path))?.to_rgb8();
            let (ph, pw) = backbone.pixel_size();
            let (ow, oh) = cfg.output_resolution.unwrap_or((pw, ph));
            let caption = rewriter.rewrite(&pair.background.caption)?;
            let model_mask = pair.mask(pool, pw, ph)?;
            let out_mask = pair.mask(pool, ow, oh)?;
            let bg_model = rgb_to_array(&resize_to(bg.clone(), pw, ph));
            let bg_out = resize_to(bg, ow, oh);

            let n = cfg.samples_per_pair;
            let (_, cond) = backbone.condition(
                &vec![bg_model; n],
                &vec![model_mask; n],
                &vec![caption.clone(); n],
            )?;
            let uncond = backbone.unconditional(&cond);
            let (c, h, w) = backbone.denoiser.latent_shape();
            let sampler = SamplerConfig {
                steps: cfg.steps,
                guidance: cfg.guidance,
                seed: pair_seed(cfg.seed, &pair.id),
                clip_sample: cfg.clip_sample,
            };
            let latents = sample_cfg(
                &predictor,
                &cond,
                &uncond,
                &backbone.schedule,
                (n, c, h, w),
                &sampler,
            )?;
            let pixels = backbone.autoencoder.decode(&latents)?;
            if !pixels.is_finite() {
                return Err(Error::NonFinite(format!(
                    "decoded output for pair {}",
                    pair.id
                )));
            }

            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                let id = format!("{}-s{k}", pair.id);
                let generated = resize_to(array_to_rgb(pixels.sample(k)), ow, oh);
                let img = recompose(&generated, &bg_out, &out_mask)?;
                let image_path = PathBuf::from("images").join(format!("{id}.png"));
                let mask_path = PathBuf::from("masks").join(format!("{id}.png"));
                img.save(out_dir.join(&image_path))?;
                out_mask.save_png(&out_dir.join(&mask_path))?;
                out.push(SmokeSample {
                    id,
                    image_path,
                    mask_path: Some(mask_path),
                    caption: caption.clone(),
                    source: Source::Synthetic,
                    split: Split::Train,
                });
            }
            Ok(out)
        };
        match run() {
            Ok(r) => records.extend(r),
            Err(e) => {
                log::warn!("quarantining pair {}: {e}", pair.id);
                quarantined.push(QuarantineEntry {
                    pair_id: pair.id.clone(),
                    background_id: pair.background.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }

    let manifest = Manifest::new(records);
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    let mut q = String::new();
    for entry in &quarantined {
        q.push_str(&serde_json::to_string(entry)?);
        q.push('\n');
    }
    write_atomic(&out_dir.join("quarantine.jsonl"), q.as_bytes())?;
    Ok(GenerationReport {
        manifest,
        quarantined,
    })
}
