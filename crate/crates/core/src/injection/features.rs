//! Pre-pooling CNN features of the mask and the masked image.

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::BinaryMask;
use crate::diffusion::grid_to_tokens;
use crate::error::{Error, Result};
use crate::tape::ParamStore;

/// Extractor outputs for one sample: mask features and masked-image
/// features, both `C1×H1×W1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub mask: Array3<f64>,
    pub masked_image: Array3<f64>,
}

impl FeatureBundle {
    pub fn new(mask: Array3<f64>, masked_image: Array3<f64>) -> Result<Self> {
        if mask.dim() != masked_image.dim() {
            return Err(Error::invalid(format!(
                "feature grids differ: {:?} vs {:?}",
                mask.dim(),
                masked_image.dim()
            )));
        }
        if mask
            .iter()
            .chain(masked_image.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(Self { mask, masked_image })
    }

    pub fn channels(&self) -> usize {
        self.mask.dim().0
    }

    pub fn mask_tokens(&self) -> Array2<f64> {
        grid_to_tokens(self.mask.view())
    }

    pub fn masked_image_tokens(&self) -> Array2<f64> {
        grid_to_tokens(self.masked_image.view())
    }
}

/// A frozen convolutional backbone returning its last feature map before
/// global pooling.
pub trait FeatureExtractor {
    /// Native `(height, width)` input size.
    fn input_size(&self) -> (usize, usize);

    /// `(channels, height, width)` of the pre-pooling feature map.
    fn output_geometry(&self) -> (usize, usize, usize);

    /// Runs on a `3×H×W` input already at [`Self::input_size`].
    fn extract(&self, input: ArrayView3<'_, f64>) -> Result<Array3<f64>>;

    /// Named weights, for freeze auditing. Remote extractors expose none.
    fn params(&self) -> ParamStore {
        ParamStore::new()
    }
}

/// Features for a mask and its masked image.
///
/// The masked image is resized bilinearly to the extractor's input size; the
/// mask is resized nearest-neighbor (so it stays binary) and its single
/// channel is replicated to three.
pub fn extract_features(
    mask: &BinaryMask,
    masked_image: ArrayView3<'_, f64>,
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureBundle> {
    let (c, h, w) = masked_image.dim();
    if c != 3 {
        return Err(Error::invalid(format!(
            "masked image has {c} channels, want 3"
        )));
    }
    if mask.dims() != (w, h) {
        return Err(Error::invalid("mask and masked image sizes differ"));
    }
    let (ih, iw) = extractor.input_size();
    let small = mask.resize_nearest(iw, ih);
    let mask_input = Array3::from_shape_fn((3, ih, iw), |(_, y, x)| small.get(x, y) as u8 as f64);
    let image_input = resize_bilinear(masked_image, ih, iw);
    FeatureBundle::new(
        extractor.extract(mask_input.view())?,
        extractor.extract(image_input.view())?,
    )
}

/// Zeroes the masked region of a `3×H×W` image.
pub fn masked_image(image: ArrayView3<'_, f64>, mask: &BinaryMask) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if mask.dims() != (w, h) {
        return Err(Error::invalid("mask and image sizes differ"));
    }
    Ok(Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        if mask.get(x, y) {
            0.0
        } else {
            image[[ch, y, x]]
        }
    }))
}

/// Half-pixel-centred bilinear resize of a `C×H×W` grid.
pub fn resize_bilinear(src: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let pos =
            ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
        let bottom = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Output size of a convolution or pooling window.
fn conv_out(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

/// Pre-pooling geometry of a standard ResNet-50 on an `h×w` input: stem
/// (7×7/2 conv, 3×3/2 max-pool) then four stages with strides 1, 2, 2, 2,
/// ending at 2048 channels.
pub fn resnet50_feature_geometry(h: usize, w: usize) -> (usize, usize, usize) {
    let spatial = |n: usize| {
        let mut n = conv_out(n, 7, 2, 3);
        n = conv_out(n, 3, 2, 1);
        for stride in [1, 2, 2, 2] {
            n = conv_out(n, 3, stride, 1);
        }
        n
    };
    (2048, spatial(h), spatial(w))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyExtractorConfig {
    pub input_size: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub strides: [usize; 2],
    pub seed: u64,
}

impl Default for ToyExtractorConfig {
    fn default() -> Self {
        Self {
            input_size: 8,
            hidden_channels: 8,
            out_channels: 16,
            strides: [2, 1],
            seed: 11,
        }
    }
}

/// Two 3×3 convolutions (SiLU between) with fixed seeded weights.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    cfg: ToyExtractorConfig,
    /// `c_out × (c_in·9)` kernels and `1 × c_out` biases.
    layers: [(Array2<f64>, Array2<f64>); 2],
}

impl ToyExtractor {
    pub fn new(cfg: ToyExtractorConfig) -> Result<Self> {
        if cfg.input_size == 0
            || cfg.hidden_channels == 0
            || cfg.out_channels == 0
            || cfg.strides.contains(&0)
        {
            return Err(Error::config("toy extractor sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layer = |c_in: usize, c_out: usize| {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((c_out, c_in * 9), || {
                std * rng.sample::<f64, _>(StandardNormal)
            });
            let b = Array2::from_shape_simple_fn((1, c_out), || {
                0.1 * rng.sample::<f64, _>(StandardNormal)
            });
            (w, b)
        };
        let l1 = layer(3, cfg.hidden_channels);
        let l2 = layer(cfg.hidden_channels, cfg.out_channels);
        Ok(Self {
            cfg,
            layers: [l1, l2],
        })
    }

    fn conv(
        input: ArrayView3<'_, f64>,
        w: &Array2<f64>,
        b: &Array2<f64>,
        stride: usize,
    ) -> Array3<f64> {
        let (c_in, h, wd) = input.dim();
        let c_out = w.nrows();
        let (oh, ow) = (conv_out(h, 3, stride, 1), conv_out(wd, 3, stride, 1));
        let mut out = Array3::zeros((c_out, oh, ow));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..c_out {
                    let mut acc = b[[0, co]];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[[co, ci * 9 + ky * 3 + kx]]
                                    * input[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[co, oy, ox]] = acc;
                }
            }
        }
        out
    }
}

impl FeatureExtractor for ToyExtractor {
    fn input_size(&self) -> (usize, usize) {
        (self.cfg.input_size, self.cfg.input_size)
    }

    fn output_geometry(&self) -> (usize, usize, usize) {
        let mut n = self.cfg.input_size;
        for s in self.cfg.strides {
            n = conv_out(n, 3, s, 1);
        }
        (self.cfg.out_channels, n, n)
    }

    fn extract(&self, input: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (c, h, w) = input.dim();
        if c != 3 || (h, w) != self.input_size() {
            return Err(Error::invalid(format!(
                "toy extractor expects 3x{0}x{0}, got {c}x{h}x{w}",
                self.cfg.input_size
            )));
        }
        let (w1, b1) = &self.layers[0];
        let hidden =
            Self::conv(input, w1, b1, self.cfg.strides[0]).mapv(|v| v / (1.0 + (-v).exp()));
        let (w2, b2) = &self.layers[1];
        Ok(Self::conv(hidden.view(), w2, b2, self.cfg.strides[1]))
    }

    fn params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            p.insert(format!("extractor.conv{}.w", i + 1), w.clone());
            p.insert(format!("extractor.conv{}.b", i + 1), b.clone());
        }
        p
    }
}
