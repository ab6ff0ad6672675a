use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use crate::corpus::{resolve, BinaryMask, SmokeSample, DEFAULT_THRESHOLD};
use crate::diffusion::{
    rgb_to_array, Autoencoder, ConditioningBundle, Denoiser, IdentityAutoencoder, LatentBatch,
    NoiseSchedule, Space, TextEncoder, ToyDenoiser, ToyDenoiserConfig, ToyTextEncoder,
};
use crate::error::{Error, Result};
use crate::injection::{
    extract_features, masked_image, FeatureExtractor, ToyExtractor, ToyExtractorConfig,
};
use crate::mrd::downsample_mask;
use crate::tape::ParamStore;

/// The frozen models the adapters are trained against.
pub struct Backbone {
    pub denoiser: Box<dyn Denoiser>,
    pub schedule: NoiseSchedule,
    pub autoencoder: Box<dyn Autoencoder>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub extractor: Box<dyn FeatureExtractor>,
}

impl Backbone {
    /// 8×8×3 toy stack on a cosine schedule of length `steps`.
    pub fn toy(steps: usize, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::cosine(steps)?;
        let cfg = ToyDenoiserConfig {
            seed,
            ..ToyDenoiserConfig::default()
        };
        let text_dim = cfg.text_dim;
        Ok(Self {
            denoiser: Box::new(ToyDenoiser::new(cfg, schedule.clone())?),
            schedule,
            autoencoder: Box::new(IdentityAutoencoder),
            text_encoder: Box::new(ToyTextEncoder::new(text_dim, seed)),
            extractor: Box::new(ToyExtractor::new(ToyExtractorConfig::default())?),
        })
    }

    /// `(height, width)` of the pixel images this backbone consumes.
    pub fn pixel_size(&self) -> (usize, usize) {
        let (_, h, w) = self.denoiser.latent_shape();
        let f = self.autoencoder.downsample_factor();
        (h * f, w * f)
    }

    /// Every named weight outside the adapters.
    pub fn params(&self) -> ParamStore {
        let mut all = self.denoiser.params().clone();
        all.extend(self.text_encoder.params());
        all.extend(self.extractor.params());
        all
    }

    /// Encodes clean images and builds the matching conditioning.
    ///
    /// `images` are `3×H×W` in `[-1, 1]` at [`Self::pixel_size`]; `masks` are
    /// at the same pixel resolution.
    pub fn condition(
        &self,
        images: &[Array3<f64>],
        masks: &[BinaryMask],
        captions: &[String],
    ) -> Result<(LatentBatch, ConditioningBundle)> {
        if images.len() != masks.len() || images.len() != captions.len() || images.is_empty() {
            return Err(Error::invalid(
                "images, masks and captions must have the same non-zero length",
            ));
        }
        let (ph, pw) = self.pixel_size();
        let factor = self.autoencoder.downsample_factor();
        let mut masked = Vec::with_capacity(images.len());
        let mut features = Vec::with_capacity(images.len());
        let mut latent_masks = Vec::with_capacity(images.len());
        for (img, m) in images.iter().zip(masks) {
            if img.dim() != (3, ph, pw) || m.dims() != (pw, ph) {
                return Err(Error::invalid(format!(
                    "expected 3x{ph}x{pw} images and masks, got {:?} and {:?}",
                    img.dim(),
                    m.dims()
                )));
            }
            let mi = masked_image(img.view(), m)?;
            features.push(extract_features(m, mi.view(), self.extractor.as_ref())?);
            latent_masks.push(downsample_mask(m, factor)?);
            masked.push(mi);
        }
        let x0 = self
            .autoencoder
            .encode(&LatentBatch::from_samples(images, Space::Pixel)?)?;
        let masked_latent = self
            .autoencoder
            .encode(&LatentBatch::from_samples(&masked, Space::Pixel)?)?;
        let cond = ConditioningBundle {
            text: captions
                .iter()
                .map(|c| self.text_encoder.encode(c))
                .collect(),
            masks: latent_masks,
            masked_image: masked_latent,
            features,
        };
        cond.validate()?;
        Ok((x0, cond))
    }

    /// The same image conditions under the empty prompt.
    pub fn unconditional(&self, cond: &ConditioningBundle) -> ConditioningBundle {
        cond.with_text(vec![self.text_encoder.encode(""); cond.batch()])
    }
}

/// One (image, mask, caption) training triple, decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    /// `3×H×W` in `[-1, 1]`.
    pub image: Array3<f64>,
    pub mask: BinaryMask,
    pub caption: String,
}

impl TrainExample {
    /// Loads a manifest record, resizing to `width×height`.
    pub fn load(sample: &SmokeSample, base: &Path, width: usize, height: usize) -> Result<Self> {
        let mask_rel = sample
            .mask_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {} has no mask", sample.id)))?;
        let img_path = resolve(base, &sample.image_path);
        let img = image::open(&img_path)?.to_rgb8();
        let img = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
        let mask = BinaryMask::load(&resolve(base, mask_rel), DEFAULT_THRESHOLD)?
            .resize_nearest(width, height);
        Ok(Self {
            id: sample.id.clone(),
            image: rgb_to_array(&img),
            mask,
            caption: sample.caption.clone(),
        })
    }
}
