//! Per-tap adapter parameters, the tap hook that applies them and the
//! adapter checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::attention::{
    block_var, project_var, AttentionBlockParams, BlockVars, FuseMlp, Linear, StreamParams,
};
use super::features::FeatureBundle;
use super::schedule::{InjectionRole, InjectionSchedule, Stream};
use crate::corpus::write_atomic;
use crate::diffusion::{
    predict_batch, ConditioningBundle, Denoiser, LatentBatch, NoHook, NoisePredictor, TapHook,
    TapPoint,
};
use crate::error::{Error, Result};
use crate::tape::{ParamStore, ParamVars, Tape, Var};

pub const ADAPTER_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Channel width `C1` of the extractor features.
    pub feature_channels: usize,
    /// Attention width `d`; the tap width when unset.
    pub attention_dim: Option<usize>,
    pub heads: usize,
    /// Zero the last fuse layer so a fresh set is the identity.
    pub zero_init_final: bool,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            feature_channels: 16,
            attention_dim: None,
            heads: 1,
            zero_init_final: true,
            seed: 0,
        }
    }
}

fn name(tap: usize, group: &str, matrix: &str) -> String {
    format!("tap{tap}.{group}.{matrix}")
}

/// Independent adapter parameters for every active tap of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub schedule: InjectionSchedule,
    pub config: AdapterConfig,
    pub params: ParamStore,
}

impl AdapterSet {
    pub fn init(
        schedule: InjectionSchedule,
        taps: &[TapPoint],
        config: AdapterConfig,
    ) -> Result<Self> {
        if config.feature_channels == 0 {
            return Err(Error::config("feature_channels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut gauss = |r: usize, c: usize, std: f64| {
            Array2::from_shape_simple_fn((r, c), || std * rng.sample::<f64, _>(StandardNormal))
        };
        for (tap, role) in schedule.active() {
            let point = find_tap(taps, tap)?;
            let c2 = point.channels;
            let d = config.attention_dim.unwrap_or(c2);
            if d == 0 || config.heads == 0 || !d.is_multiple_of(config.heads) {
                return Err(Error::config(format!(
                    "attention dim {d} with {} heads",
                    config.heads
                )));
            }
            let c1 = config.feature_channels;
            params.insert(
                name(tap, "query", "w_q"),
                gauss(c2, d, (c2 as f64).powf(-0.5)),
            );
            for s in role.streams() {
                let g = s.as_str();
                params.insert(
                    name(tap, g, "proj_w"),
                    gauss(c1, c2, (c1 as f64).powf(-0.5)),
                );
                params.insert(name(tap, g, "proj_b"), Array2::zeros((1, c2)));
                params.insert(name(tap, g, "w_k"), gauss(c2, d, (c2 as f64).powf(-0.5)));
                params.insert(name(tap, g, "w_v"), gauss(c2, d, (c2 as f64).powf(-0.5)));
            }
            let zin = role.streams().len() * d;
            params.insert(
                name(tap, "fuse", "w1"),
                gauss(zin, c2, (zin as f64).powf(-0.5)),
            );
            params.insert(name(tap, "fuse", "b1"), Array2::zeros((1, c2)));
            let w2 = if config.zero_init_final {
                Array2::zeros((c2, c2))
            } else {
                gauss(c2, c2, (c2 as f64).powf(-0.5))
            };
            params.insert(name(tap, "fuse", "w2"), w2);
            params.insert(name(tap, "fuse", "b2"), Array2::zeros((1, c2)));
        }
        Ok(Self {
            schedule,
            config,
            params,
        })
    }

    /// Parameter names belonging to `tap`.
    pub fn tap_param_names(&self, tap: usize) -> Vec<String> {
        let prefix = format!("tap{tap}.");
        self.params
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }

    fn get(&self, tap: usize, group: &str, matrix: &str) -> Result<&Array2<f64>> {
        let key = name(tap, group, matrix);
        self.params
            .get(&key)
            .ok_or_else(|| Error::config(format!("missing adapter parameter {key}")))
    }

    /// Projections (in stream order) and the attention block of `tap`.
    pub fn block(&self, tap: usize) -> Result<Option<(Vec<Linear>, AttentionBlockParams)>> {
        let role = self.schedule.role(tap);
        if role == InjectionRole::None {
            return Ok(None);
        }
        let mut projections = Vec::new();
        let mut streams = Vec::new();
        for s in role.streams() {
            let g = s.as_str();
            projections.push(Linear::new(
                self.get(tap, g, "proj_w")?.clone(),
                self.get(tap, g, "proj_b")?.clone(),
            )?);
            streams.push(StreamParams {
                w_k: self.get(tap, g, "w_k")?.clone(),
                w_v: self.get(tap, g, "w_v")?.clone(),
            });
        }
        let block = AttentionBlockParams {
            w_q: self.get(tap, "query", "w_q")?.clone(),
            streams,
            mlp: FuseMlp {
                w1: self.get(tap, "fuse", "w1")?.clone(),
                b1: self.get(tap, "fuse", "b1")?.clone(),
                w2: self.get(tap, "fuse", "w2")?.clone(),
                b2: self.get(tap, "fuse", "b2")?.clone(),
            },
            heads: self.config.heads,
        };
        Ok(Some((projections, block)))
    }

    /// Checks tap ids against `taps` and parameter shapes against tap widths.
    pub fn validate(&self, taps: &[TapPoint]) -> Result<()> {
        for tap in self.schedule.taps() {
            find_tap(taps, tap)?;
        }
        for (tap, _) in self.schedule.active() {
            let c2 = find_tap(taps, tap)?.channels;
            let (projections, block) = self.block(tap)?.expect("active tap");
            for p in &projections {
                if p.weight.dim() != (self.config.feature_channels, c2) {
                    return Err(Error::config(format!(
                        "tap {tap} projection is {:?}, want {}x{c2}",
                        p.weight.dim(),
                        self.config.feature_channels
                    )));
                }
            }
            if block.w_q.nrows() != c2
                || block.mlp.w2.ncols() != c2
                || block.mlp.w2.nrows() != block.mlp.w1.ncols()
            {
                return Err(Error::config(format!(
                    "tap {tap} block does not fit width {c2}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            version: ADAPTER_CHECKPOINT_VERSION,
            schedule: self.schedule.clone(),
            config: self.config.clone(),
            tensors: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: AdapterCheckpoint) -> Result<Self> {
        if ckpt.version != ADAPTER_CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "adapter checkpoint version {} is not supported",
                ckpt.version
            )));
        }
        Ok(Self {
            schedule: ckpt.schedule,
            config: ckpt.config,
            params: ckpt.tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(&self.to_checkpoint())?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: AdapterCheckpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        Self::from_checkpoint(ckpt).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// On-disk adapter archive: named tensors plus the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub version: u32,
    pub schedule: InjectionSchedule,
    pub config: AdapterConfig,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn find_tap(taps: &[TapPoint], id: usize) -> Result<&TapPoint> {
    taps.iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::config(format!("tap {id} is not in the denoiser registry")))
}

/// Applies an [`AdapterSet`] at the scheduled taps of one forward pass.
pub struct AdapterHook<'a> {
    schedule: &'a InjectionSchedule,
    vars: ParamVars,
    heads: usize,
    features: Option<(Var, Var)>,
}

impl<'a> AdapterHook<'a> {
    /// `vars` must hold the adapter parameters bound on `tape`.
    pub fn new(
        tape: &Tape,
        adapters: &'a AdapterSet,
        vars: ParamVars,
        features: Option<&FeatureBundle>,
    ) -> Self {
        let features = features.map(|f| {
            (
                tape.leaf(f.mask_tokens()),
                tape.leaf(f.masked_image_tokens()),
            )
        });
        Self {
            schedule: &adapters.schedule,
            vars,
            heads: adapters.config.heads,
            features,
        }
    }
}

impl TapHook for AdapterHook<'_> {
    fn at_tap(&mut self, tape: &Tape, tap: usize, x: Var) -> Result<Var> {
        let role = self.schedule.role(tap);
        if role == InjectionRole::None {
            return Ok(x);
        }
        let (fm, fmi) = self
            .features
            .ok_or_else(|| Error::invalid(format!("tap {tap} needs extractor features")))?;
        let v = |group: &str, matrix: &str| self.vars.get(&name(tap, group, matrix));
        let mut projected = Vec::new();
        let mut streams = Vec::new();
        for s in role.streams() {
            let g = s.as_str();
            let f = match s {
                Stream::Mask => fm,
                Stream::MaskedImage => fmi,
            };
            projected.push(project_var(tape, f, v(g, "proj_w")?, v(g, "proj_b")?)?);
            streams.push((v(g, "w_k")?, v(g, "w_v")?));
        }
        let block = BlockVars {
            w_q: v("query", "w_q")?,
            streams,
            w1: v("fuse", "w1")?,
            b1: v("fuse", "b1")?,
            w2: v("fuse", "w2")?,
            b2: v("fuse", "b2")?,
            heads: self.heads,
        };
        block_var(tape, x, &projected, &block)
    }
}

/// A frozen denoiser with adapters at its scheduled taps.
pub struct AdaptedDenoiser<'a, D: ?Sized> {
    pub base: &'a D,
    pub adapters: &'a AdapterSet,
}

/// Checks the adapters against the denoiser's tap registry.
pub fn attach_adapters<'a, D: Denoiser + ?Sized>(
    base: &'a D,
    adapters: &'a AdapterSet,
) -> Result<AdaptedDenoiser<'a, D>> {
    adapters.validate(base.tap_points())?;
    Ok(AdaptedDenoiser { base, adapters })
}

impl<D: Denoiser + ?Sized> NoisePredictor for AdaptedDenoiser<'_, D> {
    fn predict(
        &self,
        x_t: &LatentBatch,
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<LatentBatch> {
        if self.adapters.schedule.is_passthrough() {
            return predict_batch(self.base, x_t, t, cond, |_, _| Ok(Box::new(NoHook)));
        }
        if cond.features.is_empty() {
            return Err(Error::invalid("adapted denoiser needs extractor features"));
        }
        predict_batch(self.base, x_t, t, cond, |tape, i| {
            let vars = ParamVars::bind(tape, &self.adapters.params);
            Ok(Box::new(AdapterHook::new(
                tape,
                self.adapters,
                vars,
                cond.features.get(i),
            )))
        })
    }
}
