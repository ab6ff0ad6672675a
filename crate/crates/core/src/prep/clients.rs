//! Segmentation and captioning clients, and the single-image operations.

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::corpus::{binarize_mask, BinaryMask, PixelRect, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};

/// Box prompt in pixels, taken from a detection annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBoxPrompt {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl BBoxPrompt {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::invalid(format!("box {self:?} has zero extent")));
        }
        if !self.rect().fits_in(width, height) {
            return Err(Error::invalid(format!(
                "box {self:?} exceeds the {width}x{height} image"
            )));
        }
        Ok(())
    }

    pub fn rect(&self) -> PixelRect {
        PixelRect::new(self.x0, self.y0, self.w, self.h)
    }
}

/// Promptable segmentation model returning a soft mask at image size.
pub trait SegmentationClient {
    fn segment(&self, image: &RgbImage, prompt: &BBoxPrompt) -> Result<GrayImage>;
}

/// Captioning model with a token budget.
pub trait CaptionClient {
    fn caption(&self, image: &RgbImage, max_tokens: usize) -> Result<String>;
}

/// Mock segmenter: the prompt box filled solid.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxSegmenter;

impl SegmentationClient for BoxSegmenter {
    fn segment(&self, image: &RgbImage, p: &BBoxPrompt) -> Result<GrayImage> {
        let r = p.rect();
        Ok(GrayImage::from_fn(image.width(), image.height(), |x, y| {
            Luma([if r.contains(x as usize, y as usize) {
                255
            } else {
                0
            }])
        }))
    }
}

/// Mock captioner: a fixed text cut to the token budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedCaptioner {
    pub text: String,
}

impl CaptionClient for FixedCaptioner {
    fn caption(&self, _: &RgbImage, max_tokens: usize) -> Result<String> {
        Ok(self
            .text
            .split_whitespace()
            .take(max_tokens)
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Binarized smoke mask for one box prompt.
///
/// Fails with [`Error::NoForeground`] when the mask is empty or does not
/// touch the prompt box.
pub fn segment_smoke(
    image: &RgbImage,
    prompt: &BBoxPrompt,
    client: &dyn SegmentationClient,
) -> Result<BinaryMask> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    prompt.validate(w, h)?;
    let raster = client.segment(image, prompt)?;
    if raster.dimensions() != image.dimensions() {
        return Err(Error::invalid(format!(
            "segmentation is {:?}, image is {w}x{h}",
            raster.dimensions()
        )));
    }
    let mask = binarize_mask(&raster, DEFAULT_THRESHOLD)?;
    let r = prompt.rect();
    let overlaps = (r.y0..r.y0 + r.h).any(|y| (r.x0..r.x0 + r.w).any(|x| mask.get(x, y)));
    if !overlaps {
        return Err(Error::NoForeground);
    }
    Ok(mask)
}

/// Removes every stop pattern (case-insensitive, whole words) and collapses
/// whitespace.
pub fn strip_patterns(text: &str, patterns: &[String]) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    let norm = |w: &str| {
        w.trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase()
    };
    for p in patterns {
        let pat: Vec<String> = p.split_whitespace().map(norm).collect();
        if pat.is_empty() {
            continue;
        }
        let mut i = 0;
        while i + pat.len() <= words.len() {
            if words[i..i + pat.len()]
                .iter()
                .map(|w| norm(w))
                .eq(pat.iter().cloned())
            {
                words.drain(i..i + pat.len());
            } else {
                i += 1;
            }
        }
    }
    words.join(" ")
}

/// Caption within `max_tokens` whitespace tokens after stop-pattern removal.
/// An empty result is retried once, then reported as an error.
pub fn caption_image(
    image: &RgbImage,
    client: &dyn CaptionClient,
    max_tokens: usize,
    stop_patterns: &[String],
) -> Result<String> {
    if max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be positive"));
    }
    for _ in 0..2 {
        let raw = client.caption(image, max_tokens)?;
        let text = strip_patterns(&raw, stop_patterns);
        let text: Vec<&str> = text.split_whitespace().take(max_tokens).collect();
        if !text.is_empty() {
            return Ok(text.join(" "));
        }
    }
    Err(Error::invalid("captioner returned an empty caption twice"))
}

/// Captions in input order.
pub fn caption_batch(
    images: &[RgbImage],
    client: &dyn CaptionClient,
    max_tokens: usize,
    stop_patterns: &[String],
) -> Vec<Result<String>> {
    images
        .iter()
        .map(|img| caption_image(img, client, max_tokens, stop_patterns))
        .collect()
}
