use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Dilate,
    Erode,
}

/// Sliding-window max (dilate) or min (erode) over a `k×k` square.
///
/// The window covering output `x` spans `x - a ..= x - a + k - 1` with
/// `a = (k - 1) / 2`, likewise in `y`. Pixels outside the image count as 0
/// for dilation and 1 for erosion.
pub fn morph(mask: &BinaryMask, op: MorphOp, kernel: usize) -> Result<BinaryMask> {
    if kernel == 0 {
        return Err(Error::invalid("morphology kernel must be at least 1"));
    }
    if kernel == 1 {
        return Ok(mask.clone());
    }
    let (w, h) = mask.dims();
    let pad = op == MorphOp::Erode;
    let a = (kernel - 1) / 2;
    // For dilation a window hits if any pixel is set; for erosion if any is
    // clear. Both reduce to "any pixel differs from the padding value".
    let hit = |v: bool| v != pad;
    // Horizontal pass: does the row window contain a hit?
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let prefix: Vec<usize> = std::iter::once(0)
            .chain((0..w).scan(0, |acc, x| {
                *acc += hit(mask.get(x, y)) as usize;
                Some(*acc)
            }))
            .collect();
        for x in 0..w {
            let lo = x.saturating_sub(a);
            let hi = (x + kernel - a).min(w);
            rows[y * w + x] = lo < hi && prefix[hi] > prefix[lo];
        }
    }
    let mut out = BinaryMask::zeros(w, h);
    for x in 0..w {
        let prefix: Vec<usize> = std::iter::once(0)
            .chain((0..h).scan(0, |acc, y| {
                *acc += rows[y * w + x] as usize;
                Some(*acc)
            }))
            .collect();
        for y in 0..h {
            let lo = y.saturating_sub(a);
            let hi = (y + kernel - a).min(h);
            let any_hit = lo < hi && prefix[hi] > prefix[lo];
            out.set(x, y, any_hit != pad);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrdConfig {
    pub omega: f64,
    pub kernel_min: usize,
    pub kernel_max: usize,
    pub max_rounds: usize,
    /// Always apply `max_rounds` rounds instead of drawing the count.
    pub fixed_rounds: bool,
    /// Use `M xor perturb(M)` rather than the perturbed mask itself.
    pub xor_difference: bool,
    pub seed: u64,
}

impl Default for MrdConfig {
    fn default() -> Self {
        Self {
            omega: 0.4,
            kernel_min: 10,
            kernel_max: 20,
            max_rounds: 3,
            fixed_rounds: false,
            xor_difference: false,
            seed: 0,
        }
    }
}

impl MrdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config(format!(
                "omega {} outside [0, 1]",
                self.omega
            )));
        }
        if self.kernel_min == 0 || self.kernel_min > self.kernel_max {
            return Err(Error::config(format!(
                "kernel range {}..={} is invalid",
                self.kernel_min, self.kernel_max
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::config("max_rounds must be at least 1"));
        }
        Ok(())
    }

    /// Farthest a perturbation can move any pixel, in Chebyshev distance.
    pub fn reach(&self) -> usize {
        self.max_rounds * self.kernel_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedMask {
    pub bits: BinaryMask,
    pub rounds: Vec<(MorphOp, usize)>,
    pub source: BinaryMask,
}

/// Applies a random sequence of dilations and erosions to `mask`.
pub fn perturb_mask(
    mask: &BinaryMask,
    cfg: &MrdConfig,
    rng: &mut impl Rng,
) -> Result<PerturbedMask> {
    cfg.validate()?;
    let (w, h) = mask.dims();
    if w == 0 || h == 0 {
        return Err(Error::invalid("cannot perturb an empty grid"));
    }
    let n = if cfg.fixed_rounds {
        cfg.max_rounds
    } else {
        rng.random_range(1..=cfg.max_rounds)
    };
    let mut bits = mask.clone();
    let mut rounds = Vec::with_capacity(n);
    for _ in 0..n {
        let op = if rng.random_bool(0.5) {
            MorphOp::Dilate
        } else {
            MorphOp::Erode
        };
        let k = rng.random_range(cfg.kernel_min..=cfg.kernel_max);
        bits = morph(&bits, op, k)?;
        rounds.push((op, k));
    }
    if cfg.xor_difference {
        bits = bits.xor(mask)?;
    }
    Ok(PerturbedMask {
        bits,
        rounds,
        source: mask.clone(),
    })
}

/// Nearest-neighbor subsampling at stride `factor`.
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::invalid(format!(
            "{w}x{h} mask is not divisible by factor {factor}"
        )));
    }
    Ok(BinaryMask::from_fn(w / factor, h / factor, |x, y| {
        mask.get(x * factor, y * factor)
    }))
}
