//! Native full-reference image metrics over 8-bit RGB.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::corpus::BinaryMask;
use crate::error::{Error, Result};

pub const MAX_INTENSITY: f64 = 255.0;

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::invalid(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

fn check_region(a: &RgbImage, region: Option<&BinaryMask>) -> Result<()> {
    if let Some(m) = region {
        if m.dims() != (a.width() as usize, a.height() as usize) {
            return Err(Error::invalid("region mask size differs from the images"));
        }
        if m.is_empty() {
            return Err(Error::NoForeground);
        }
    }
    Ok(())
}

/// Mean squared error over all channels, optionally restricted to `region`.
pub fn mse_img(a: &RgbImage, b: &RgbImage, region: Option<&BinaryMask>) -> Result<f64> {
    same_dims(a, b)?;
    check_region(a, region)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y, pa), pb) in a.enumerate_pixels().zip(b.pixels()) {
        if region.is_some_and(|m| !m.get(x as usize, y as usize)) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] as f64 - pb[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    Ok(sum / n as f64)
}

/// `10·log10(255² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage, region: Option<&BinaryMask>) -> Result<f64> {
    let mse = mse_img(a, b, region)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (MAX_INTENSITY * MAX_INTENSITY / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SsimWindow {
    Uniform,
    /// Normalized Gaussian weights with standard deviation `sigma`.
    Gaussian {
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub weights: SsimWindow,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            weights: SsimWindow::Uniform,
        }
    }
}

/// Rec.601 luma plane, row-major.
pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Inclusive-exclusive prefix sums with a zero border, `(w+1)·(h+1)`.
fn integral(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn ssim_index(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM map over every `window×window` position of the luma planes, in
/// row-major window order.
pub fn ssim_map(a: &RgbImage, b: &RgbImage, cfg: &SsimConfig) -> Result<(usize, usize, Vec<f64>)> {
    same_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    let k = cfg.window;
    if k == 0 || w < k || h < k {
        return Err(Error::invalid(format!(
            "{w}x{h} image is smaller than the {k}x{k} window"
        )));
    }
    let c1 = (cfg.k1 * MAX_INTENSITY).powi(2);
    let c2 = (cfg.k2 * MAX_INTENSITY).powi(2);
    let (la, lb) = (luminance(a), luminance(b));
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut out = Vec::with_capacity(ow * oh);
    match cfg.weights {
        SsimWindow::Uniform => {
            let sa = integral(w, h, |i| la[i]);
            let sb = integral(w, h, |i| lb[i]);
            let saa = integral(w, h, |i| la[i] * la[i]);
            let sbb = integral(w, h, |i| lb[i] * lb[i]);
            let sab = integral(w, h, |i| la[i] * lb[i]);
            let n = (k * k) as f64;
            let boxed = |s: &[f64], x: usize, y: usize| {
                let r = w + 1;
                (s[(y + k) * r + x + k] - s[y * r + x + k] - s[(y + k) * r + x] + s[y * r + x]) / n
            };
            for y in 0..oh {
                for x in 0..ow {
                    let (mx, my) = (boxed(&sa, x, y), boxed(&sb, x, y));
                    let vx = (boxed(&saa, x, y) - mx * mx).max(0.0);
                    let vy = (boxed(&sbb, x, y) - my * my).max(0.0);
                    let cxy = boxed(&sab, x, y) - mx * my;
                    out.push(ssim_index(mx, my, vx, vy, cxy, c1, c2));
                }
            }
        }
        SsimWindow::Gaussian { sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::invalid("gaussian sigma must be positive"));
            }
            let c = (k as f64 - 1.0) / 2.0;
            let g: Vec<f64> = (0..k)
                .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                .collect();
            let total: f64 = g.iter().sum::<f64>().powi(2);
            for y in 0..oh {
                for x in 0..ow {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wgt = g[dy] * g[dx] / total;
                            let i = (y + dy) * w + x + dx;
                            mx += wgt * la[i];
                            my += wgt * lb[i];
                            xx += wgt * la[i] * la[i];
                            yy += wgt * lb[i] * lb[i];
                            xy += wgt * la[i] * lb[i];
                        }
                    }
                    out.push(ssim_index(
                        mx,
                        my,
                        (xx - mx * mx).max(0.0),
                        (yy - my * my).max(0.0),
                        xy - mx * my,
                        c1,
                        c2,
                    ));
                }
            }
        }
    }
    Ok((ow, oh, out))
}

/// Mean SSIM over luma. With `region`, only windows whose center pixel
/// (`x + window/2`, `y + window/2`) lies in the mask are averaged.
pub fn ssim(
    a: &RgbImage,
    b: &RgbImage,
    cfg: &SsimConfig,
    region: Option<&BinaryMask>,
) -> Result<f64> {
    check_region(a, region)?;
    let (ow, _, map) = ssim_map(a, b, cfg)?;
    let half = cfg.window / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        let (x, y) = (i % ow, i / ow);
        if region.is_none_or(|m| m.get(x + half, y + half)) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid(
            "no SSIM window is centered inside the region",
        ));
    }
    Ok(sum / n as f64)
}
