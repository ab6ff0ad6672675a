//! Scoring clients.

use image::RgbImage;

use super::score::Scorer;
use crate::corpus::BinaryMask;
use crate::error::{Error, Result};
use crate::mrd::{morph, MorphOp};

pub const DEFAULT_SCORING_PROMPT: &str =
    "Rate the smoke in this image from 0 to 10 on three criteria: \
color (how natural the smoke color is), visibility (how clearly the smoke stands out), and \
semi-transparency (how well the background shows through the plume edges; fully transparent \
smoke scores 8-10). Answer as: color: <n>, visibility: <n>, semi-transparency: <n>";

/// A model that scores a generated image as `[color, visibility, translucency]`.
pub trait ScorerClient: Send + Sync {
    fn score(&self, image: &RgbImage, mask: Option<&BinaryMask>, prompt: &str) -> Result<[f64; 3]>;

    fn kind(&self) -> Scorer {
        Scorer::Mllm
    }
}

/// Deterministic image-statistics heuristic for offline runs.
///
/// * color: `10·(1 − |mean gray in mask − 200| / 200)`
/// * visibility: `10·|mean gray in mask − mean gray outside| / 255`
/// * translucency: `10·var(edge band) / var(mask)`, clamped, where the edge
///   band is the mask minus its 3×3 erosion
///
/// Without a mask the whole frame is the region.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

pub fn luma(img: &RgbImage, x: u32, y: u32) -> f64 {
    let p = img.get_pixel(x, y);
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (
        mean,
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n,
    )
}

impl ScorerClient for MockScorer {
    fn score(
        &self,
        image: &RgbImage,
        mask: Option<&BinaryMask>,
        _prompt: &str,
    ) -> Result<[f64; 3]> {
        let (w, h) = image.dimensions();
        let region = match mask {
            Some(m) if m.dims() != (w as usize, h as usize) => {
                return Err(Error::invalid(format!(
                    "mask {:?} does not match image {w}x{h}",
                    m.dims()
                )));
            }
            Some(m) if !m.is_empty() => m.clone(),
            _ => BinaryMask::ones(w as usize, h as usize),
        };
        let band = region.xor(&morph(&region, MorphOp::Erode, 3)?)?;
        let (mut inside, mut outside, mut edge) = (Vec::new(), Vec::new(), Vec::new());
        for y in 0..h {
            for x in 0..w {
                let g = luma(image, x, y);
                if region.get(x as usize, y as usize) {
                    inside.push(g);
                    if band.get(x as usize, y as usize) {
                        edge.push(g);
                    }
                } else {
                    outside.push(g);
                }
            }
        }
        let (m_in, v_in) = mean_var(&inside);
        let color = 10.0 * (1.0 - (m_in - 200.0).abs() / 200.0);
        let visibility = if outside.is_empty() {
            0.0
        } else {
            10.0 * (m_in - mean_var(&outside).0).abs() / 255.0
        };
        let translucency = if v_in > 0.0 {
            10.0 * (mean_var(&edge).1 / v_in).min(1.0)
        } else {
            0.0
        };
        Ok([
            color.clamp(0.0, 10.0),
            visibility.clamp(0.0, 10.0),
            translucency,
        ])
    }

    fn kind(&self) -> Scorer {
        Scorer::Mock
    }
}
