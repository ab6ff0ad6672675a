//! CPU-sized stand-ins for the backbone, its text encoder and autoencoder.
//!
//! The toy denoiser mirrors the layout of an inpainting U-Net: its input is
//! the noisy latent concatenated with the latent mask and masked-image latent,
//! followed by nine stages (four down, a middle, four up with skip
//! connections) whose outputs are the tap points `0..=8`.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, SampleCond, TapHook, TapPoint, TextEncoder};
use super::latent::{grid_to_tokens, LatentBatch, Space};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tape::{ParamStore, ParamVars, Tape, Var};

pub const TOY_STAGES: usize = 9;
const TIME_FEATURES: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub latent_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of each of the nine stages; must be mirror-symmetric so
    /// up-path skips line up.
    pub widths: [usize; TOY_STAGES],
    pub text_dim: usize,
    /// Scale of the text pathway into the first stage.
    pub text_gain: f64,
    /// Scale of the learned readout on top of the analytic prior term.
    pub readout_gain: f64,
    pub seed: u64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            height: 8,
            width: 8,
            widths: [16, 16, 24, 24, 32, 24, 24, 16, 16],
            text_dim: 8,
            text_gain: 0.05,
            readout_gain: 0.25,
            seed: 0,
        }
    }
}

/// Frozen stand-in backbone.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyDenoiserConfig,
    schedule: NoiseSchedule,
    taps: Vec<TapPoint>,
    params: ParamStore,
    mixing: Array2<f64>,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// Row-normalized 3×3 box average over an `h×w` token grid.
fn box_mixing(h: usize, w: usize) -> Array2<f64> {
    let n = h * w;
    let mut m = Array2::zeros((n, n));
    for y in 0..h {
        for x in 0..w {
            let mut nbrs = Vec::new();
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        nbrs.push(ny as usize * w + nx as usize);
                    }
                }
            }
            let k = 1.0 / nbrs.len() as f64;
            for j in nbrs {
                m[[y * w + x, j]] = k;
            }
        }
    }
    m
}

impl ToyDenoiser {
    pub fn new(cfg: ToyDenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        let widths = cfg.widths;
        if widths.contains(&0) || cfg.latent_channels == 0 || cfg.height == 0 || cfg.width == 0 {
            return Err(Error::config("toy denoiser dimensions must be positive"));
        }
        if (0..4).any(|i| widths[i] != widths[TOY_STAGES - 1 - i]) {
            return Err(Error::config(
                "toy denoiser widths must be mirror-symmetric",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.latent_channels;
        let in0 = 2 * c + 1;
        let mut params = ParamStore::new();
        let mut insert = |name: String, v: Array2<f64>| {
            params.insert(name, v);
        };
        for i in 0..TOY_STAGES {
            let fan_in = if i == 0 { in0 } else { widths[i - 1] };
            let out = widths[i];
            insert(
                format!("unet.stage{i}.w"),
                randn(&mut rng, fan_in, out, (2.0 / fan_in as f64).sqrt()),
            );
            insert(format!("unet.stage{i}.b"), randn(&mut rng, 1, out, 0.1));
            insert(
                format!("unet.stage{i}.temb"),
                randn(&mut rng, TIME_FEATURES, out, 0.5),
            );
            if i > 0 && widths[i - 1] != out {
                insert(
                    format!("unet.stage{i}.skip"),
                    randn(&mut rng, fan_in, out, (1.0 / fan_in as f64).sqrt()),
                );
            }
        }
        insert(
            "unet.text_proj".into(),
            randn(&mut rng, cfg.text_dim, widths[0], 1.0),
        );
        let last = widths[TOY_STAGES - 1];
        insert(
            "unet.out.w".into(),
            randn(&mut rng, last, c, cfg.readout_gain / (last as f64).sqrt()),
        );
        insert("unet.out.b".into(), Array2::zeros((1, c)));

        let taps = (0..TOY_STAGES)
            .map(|id| TapPoint {
                id,
                channels: widths[id],
                height: cfg.height,
                width: cfg.width,
            })
            .collect();
        let mixing = box_mixing(cfg.height, cfg.width);
        Ok(Self {
            cfg,
            schedule,
            taps,
            params,
            mixing,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn time_features(&self, t: usize) -> Result<Array2<f64>> {
        let a = self.schedule.alpha(t)?;
        let phase = std::f64::consts::PI * t as f64 / self.schedule.steps() as f64;
        Ok(Array2::from_shape_vec(
            (1, TIME_FEATURES),
            vec![a.sqrt(), (1.0 - a).sqrt(), phase.sin(), phase.cos()],
        )
        .expect("static shape"))
    }
}

impl Denoiser for ToyDenoiser {
    fn tap_points(&self) -> &[TapPoint] {
        &self.taps
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.cfg.latent_channels, self.cfg.height, self.cfg.width)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(
        &self,
        tape: &Tape,
        p: &ParamVars,
        x_t: Var,
        t: usize,
        cond: &SampleCond<'_>,
        hook: &mut dyn TapHook,
    ) -> Result<Var> {
        let (c, h, w) = self.latent_shape();
        let n = h * w;
        if tape.shape(x_t) != (n, c) {
            return Err(Error::invalid(format!(
                "toy denoiser expects {n}x{c} tokens, got {:?}",
                tape.shape(x_t)
            )));
        }
        if cond.mask.dims() != (w, h) || cond.masked_latent.dim() != (c, h, w) {
            return Err(Error::invalid(
                "conditioning resolution differs from latent",
            ));
        }

        let alpha = self.schedule.alpha(t)?;
        let tf = tape.leaf(self.time_features(t)?);
        let mask_col = Array2::from_shape_fn((n, 1), |(i, _)| cond.mask.bits()[i] as f64);
        let masked = grid_to_tokens(cond.masked_latent);
        let mask_v = tape.leaf(mask_col);
        let masked_v = tape.leaf(masked);
        let input = tape.concat_cols(&[x_t, mask_v, masked_v])?;
        let mixing = tape.leaf(self.mixing.clone());

        let text_row = {
            let pooled = if cond.text.nrows() == 0 {
                Array2::zeros((1, self.cfg.text_dim))
            } else {
                cond.text
                    .mean_axis(ndarray::Axis(0))
                    .expect("non-empty")
                    .insert_axis(ndarray::Axis(0))
            };
            if pooled.ncols() != self.cfg.text_dim {
                return Err(Error::invalid(format!(
                    "text embedding width {} != {}",
                    pooled.ncols(),
                    self.cfg.text_dim
                )));
            }
            let pooled = tape.leaf(pooled * self.cfg.text_gain);
            tape.matmul(pooled, p.get("unet.text_proj")?)?
        };

        let mut outputs: Vec<Var> = Vec::with_capacity(TOY_STAGES);
        let mut h_prev = input;
        for i in 0..TOY_STAGES {
            let bias = {
                let temb = tape.matmul(tf, p.get(&format!("unet.stage{i}.temb"))?)?;
                let b = tape.add(temb, p.get(&format!("unet.stage{i}.b"))?)?;
                if i == 0 {
                    tape.add(b, text_row)?
                } else {
                    b
                }
            };
            let src = if i == 0 {
                h_prev
            } else {
                tape.matmul(mixing, h_prev)?
            };
            let pre = tape.matmul(src, p.get(&format!("unet.stage{i}.w"))?)?;
            let pre = tape.add_row(pre, bias)?;
            let act = tape.silu(pre);
            let mut hcur = if i == 0 {
                act
            } else {
                let skip = match p.get(&format!("unet.stage{i}.skip")) {
                    Ok(s) => tape.matmul(h_prev, s)?,
                    Err(_) => h_prev,
                };
                tape.add(skip, act)?
            };
            if i > TOY_STAGES / 2 {
                let mirror = outputs[TOY_STAGES - 1 - i];
                let sum = tape.add(hcur, mirror)?;
                hcur = tape.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
            }
            let hcur = hook.at_tap(tape, i, hcur)?;
            if tape.shape(hcur) != (n, self.taps[i].channels) {
                return Err(Error::invalid(format!(
                    "tap {i} hook changed the activation shape"
                )));
            }
            outputs.push(hcur);
            h_prev = hcur;
        }

        // Posterior-mean noise estimate under a unit Gaussian prior, plus the readout.
        let prior = tape.scale(x_t, (1.0 - alpha).sqrt());
        let read = tape.matmul(h_prev, p.get("unet.out.w")?)?;
        let read = tape.add_row(read, p.get("unet.out.b")?)?;
        tape.add(prior, read)
    }
}

/// Whitespace tokenizer with hashed embeddings.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    table: Array2<f64>,
    max_tokens: usize,
}

const TEXT_BUCKETS: usize = 257;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47);
        Self {
            table: randn(&mut rng, TEXT_BUCKETS, dim, 1.0),
            max_tokens: 77,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    /// `L×E` token embeddings; the empty prompt gives `0×E`.
    pub fn encode(&self, caption: &str) -> Array2<f64> {
        let tokens: Vec<String> = caption
            .split_whitespace()
            .map(|t| t.to_lowercase())
            .take(self.max_tokens)
            .collect();
        let mut out = Array2::zeros((tokens.len(), self.dim()));
        for (i, tok) in tokens.iter().enumerate() {
            let row = (fnv1a(tok) % TEXT_BUCKETS as u64) as usize;
            out.row_mut(i).assign(&self.table.row(row));
        }
        out
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        ToyTextEncoder::dim(self)
    }

    fn encode(&self, caption: &str) -> Array2<f64> {
        ToyTextEncoder::encode(self, caption)
    }

    fn params(&self) -> ParamStore {
        ParamStore::from([("text_encoder.table".to_string(), self.table.clone())])
    }
}

/// Pixel ↔ latent mapping.
pub trait Autoencoder {
    fn downsample_factor(&self) -> usize;
    fn encode(&self, pixels: &LatentBatch) -> Result<LatentBatch>;
    fn decode(&self, latents: &LatentBatch) -> Result<LatentBatch>;
}

/// Pixel space is latent space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAutoencoder;

impl Autoencoder for IdentityAutoencoder {
    fn downsample_factor(&self) -> usize {
        1
    }

    fn encode(&self, pixels: &LatentBatch) -> Result<LatentBatch> {
        Ok(LatentBatch {
            data: pixels.data.clone(),
            space: Space::Latent,
        })
    }

    fn decode(&self, latents: &LatentBatch) -> Result<LatentBatch> {
        Ok(LatentBatch {
            data: latents.data.clone(),
            space: Space::Pixel,
        })
    }
}

/// Average-pool encoder and nearest-neighbor decoder at a fixed factor.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolAutoencoder {
    pub factor: usize,
}

impl Autoencoder for AvgPoolAutoencoder {
    fn downsample_factor(&self) -> usize {
        self.factor
    }

    fn encode(&self, pixels: &LatentBatch) -> Result<LatentBatch> {
        let f = self.factor;
        let (b, c, h, w) = pixels.shape();
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} not divisible by factor {f}"
            )));
        }
        let mut data = ndarray::Array4::zeros((b, c, h / f, w / f));
        let k = 1.0 / (f * f) as f64;
        Zip::indexed(&mut data).for_each(|(bi, ci, y, x), o| {
            let mut sum = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    sum += pixels.data[[bi, ci, y * f + dy, x * f + dx]];
                }
            }
            *o = sum * k;
        });
        Ok(LatentBatch {
            data,
            space: Space::Latent,
        })
    }

    fn decode(&self, latents: &LatentBatch) -> Result<LatentBatch> {
        let f = self.factor;
        let (b, c, h, w) = latents.shape();
        let data = ndarray::Array4::from_shape_fn((b, c, h * f, w * f), |(bi, ci, y, x)| {
            latents.data[[bi, ci, y / f, x / f]]
        });
        Ok(LatentBatch {
            data,
            space: Space::Pixel,
        })
    }
}
