use image::RgbImage;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Pixel,
    Latent,
}

/// A `B×C×H×W` grid of reals. Pixel-space batches hold RGB in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub data: Array4<f64>,
    pub space: Space,
}

impl LatentBatch {
    pub fn new(data: Array4<f64>, space: Space) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent batch".into()));
        }
        Ok(Self { data, space })
    }

    pub fn zeros(shape: (usize, usize, usize, usize), space: Space) -> Self {
        Self {
            data: Array4::zeros(shape),
            space,
        }
    }

    pub fn randn(shape: (usize, usize, usize, usize), space: Space, rng: &mut impl Rng) -> Self {
        let data = Array4::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
        Self { data, space }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn sample(&self, b: usize) -> ArrayView3<'_, f64> {
        self.data.slice(s![b, .., .., ..])
    }

    /// Sample `b` as a token matrix: one row per pixel in row-major order,
    /// one column per channel.
    pub fn tokens(&self, b: usize) -> Array2<f64> {
        grid_to_tokens(self.sample(b))
    }

    pub fn set_tokens(&mut self, b: usize, tokens: &Array2<f64>) {
        let (_, c, h, w) = self.shape();
        let grid = tokens_to_grid(tokens, c, h, w);
        self.data.slice_mut(s![b, .., .., ..]).assign(&grid);
    }

    pub fn from_samples(samples: &[Array3<f64>], space: Space) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let (c, h, w) = first.dim();
        let mut data = Array4::zeros((samples.len(), c, h, w));
        for (b, s) in samples.iter().enumerate() {
            if s.dim() != (c, h, w) {
                return Err(Error::invalid("batch samples differ in shape"));
            }
            data.slice_mut(s![b, .., .., ..]).assign(s);
        }
        Self::new(data, space)
    }

    /// Stacks RGB images into a pixel-space batch with values in `[-1, 1]`.
    pub fn from_rgb_images(images: &[RgbImage]) -> Result<Self> {
        let samples: Vec<_> = images.iter().map(rgb_to_array).collect();
        Self::from_samples(&samples, Space::Pixel)
    }

    /// Converts sample `b` of a pixel-space batch back to 8-bit RGB.
    pub fn to_rgb_image(&self, b: usize) -> RgbImage {
        array_to_rgb(self.sample(b))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `3×H×W` array with values in `[-1, 1]`.
pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0
    })
}

pub fn array_to_rgb(a: ArrayView3<'_, f64>) -> RgbImage {
    let (_, h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            ((a[[c, y as usize, x as usize]] + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn grid_to_tokens(grid: ArrayView3<'_, f64>) -> Array2<f64> {
    let (c, h, w) = grid.dim();
    Array2::from_shape_fn((h * w, c), |(n, ch)| grid[[ch, n / w, n % w]])
}

pub fn tokens_to_grid(tokens: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| tokens[[y * w + x, ch]])
}

/// Elementwise `a·x + b·y` over equally shaped batches.
pub(crate) fn axpby(a: f64, x: &LatentBatch, b: f64, y: &LatentBatch) -> Result<LatentBatch> {
    x.same_shape(y, "axpby")?;
    let mut data = x.data.clone();
    Zip::from(&mut data)
        .and(&y.data)
        .for_each(|o, &yv| *o = a * *o + b * yv);
    Ok(LatentBatch {
        data,
        space: x.space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip_row_major() {
        let grid = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let t = grid_to_tokens(grid.view());
        assert_eq!(t.dim(), (12, 2));
        // token index = y * W + x
        assert_eq!(t[[6, 1]], 112.0);
        assert_eq!(tokens_to_grid(&t, 2, 3, 4), grid);
    }

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 255]));
        let batch = LatentBatch::from_rgb_images(std::slice::from_ref(&img)).unwrap();
        assert_eq!(batch.shape(), (1, 3, 4, 5));
        assert_eq!(batch.to_rgb_image(0), img);
    }

    #[test]
    fn non_finite_rejected() {
        let mut d = Array4::zeros((1, 1, 1, 1));
        d[[0, 0, 0, 0]] = f64::NAN;
        assert!(LatentBatch::new(d, Space::Latent).is_err());
    }
}
