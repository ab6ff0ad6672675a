//! Binary masks and their raster conversions.
//!
//! Mask files on disk are single-channel PNGs with foreground 255 and
//! background 0. In memory a mask is a row-major grid of `0`/`1` bytes.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// Default binarization threshold on an 8-bit scale.
pub const DEFAULT_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, true)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![value as u8; width * height],
        }
    }

    /// Builds a mask from row-major bits. Every element must be 0 or 1.
    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} mask bits for {width}x{height}, got {}",
                width * height,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("mask bit {v} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Filled axis-aligned rectangle; the rectangle is clipped to the grid.
    pub fn from_rect(
        width: usize,
        height: usize,
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
    ) -> Self {
        Self::from_fn(width, height, |x, y| {
            x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Pixelwise XOR; dimensions must agree.
    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a ^ b)
                .collect(),
        })
    }

    /// `true` when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub(crate) fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "mask dimensions differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Nearest-neighbor resize. Keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            let sx = (x * self.width) / width;
            let sy = (y * self.height) / height;
            self.get(sx, sy)
        })
    }

    /// Renders to an 8-bit raster with foreground 255.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads a mask file and binarizes it at `threshold`.
    pub fn load(path: &Path, threshold: u8) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        binarize_mask(&img, threshold)
    }
}

/// `bits[y][x] = 1` iff `raster[y][x] >= threshold`.
pub fn binarize_mask(raster: &GrayImage, threshold: u8) -> Result<BinaryMask> {
    let (w, h) = raster.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("cannot binarize an empty raster"));
    }
    let bits = raster
        .as_raw()
        .iter()
        .map(|&v| (v >= threshold) as u8)
        .collect();
    BinaryMask::from_bits(w as usize, h as usize, bits)
}
