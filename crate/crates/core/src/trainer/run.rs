use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, TrainExample};
use super::config::TrainConfig;
use super::freeze::FreezePolicy;
use super::optim::AdamW;
use super::step::{train_step, StepStats};
use crate::corpus::{read_jsonl, write_atomic, JsonlAppender};
use crate::error::{Error, Result};
use crate::injection::{AdapterConfig, AdapterSet, InjectionSchedule, ADAPTER_CHECKPOINT_VERSION};
use crate::tape::ParamStore;

/// Exact position in a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::invalid("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Last completed iteration.
    pub iter: usize,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub rng: RngState,
}

/// Adapter archive plus the state needed to resume training. Readable by
/// [`AdapterSet::load`], which ignores the `train` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: u32,
    pub schedule: InjectionSchedule,
    pub config: AdapterConfig,
    pub tensors: ParamStore,
    pub train: TrainProgress,
}

impl TrainCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if ckpt.version != ADAPTER_CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn adapters(&self) -> AdapterSet {
        AdapterSet {
            schedule: self.schedule.clone(),
            config: self.config.clone(),
            params: self.tensors.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResumeMode {
    /// Continue from the newest checkpoint if one exists.
    #[default]
    Resume,
    /// Ignore and remove existing checkpoints.
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub omega_term: f64,
    pub base_term: f64,
    pub lr: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub start_iter: usize,
    pub final_iter: usize,
    /// Loss of every iteration run in this call.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub adapters: AdapterSet,
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

pub fn checkpoint_path(out_dir: &Path, iter: usize) -> PathBuf {
    checkpoint_dir(out_dir).join(format!("iter-{iter:08}.json"))
}

/// Newest checkpoint by iteration number in the file name.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = checkpoint_dir(out_dir);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let iter = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("iter-"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(i) = iter {
            if best.as_ref().is_none_or(|(b, _)| i > *b) {
                best = Some((i, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Settings that must match between a checkpoint and the run resuming it.
fn resume_compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        max_iters: 0,
        checkpoint_every: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Trains `adapters` for `cfg.max_iters` iterations, checkpointing into
/// `out_dir/checkpoints` and logging to `out_dir/metrics.jsonl`.
pub fn run_training(
    backbone: &mut Backbone,
    adapters: AdapterSet,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    policy: &FreezePolicy,
    out_dir: &Path,
    mode: ResumeMode,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    adapters.validate(backbone.denoiser.tap_points())?;
    fs::create_dir_all(checkpoint_dir(out_dir)).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");

    let (mut adapters, mut opt, mut rng, start) = match (mode, latest_checkpoint(out_dir)?) {
        (ResumeMode::Resume, Some(path)) => {
            let ckpt = TrainCheckpoint::load(&path).map_err(|e| match e {
                Error::Checkpoint { path, reason } => Error::Checkpoint {
                    path,
                    reason: format!(
                        "{reason}; refusing to resume, restart explicitly to discard it"
                    ),
                },
                other => other,
            })?;
            if !resume_compatible(&ckpt.train.config, cfg) {
                return Err(Error::Checkpoint {
                    path,
                    reason: "training config differs from the checkpoint".into(),
                });
            }
            let rng = ckpt.train.rng.restore()?;
            let iter = ckpt.train.iter;
            let rows: Vec<MetricsRow> = read_jsonl(&metrics_path)?;
            let kept: Vec<u8> = rows
                .iter()
                .filter(|r| r.iter <= iter)
                .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
                .collect::<std::result::Result<String, _>>()?
                .into_bytes();
            write_atomic(&metrics_path, &kept)?;
            (ckpt.adapters(), ckpt.train.optimizer, rng, iter)
        }
        _ => {
            if mode == ResumeMode::Restart {
                let dir = checkpoint_dir(out_dir);
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            write_atomic(&metrics_path, b"")?;
            (
                adapters,
                AdamW::new(cfg.optimizer.clone()),
                ChaCha8Rng::seed_from_u64(cfg.seed),
                0,
            )
        }
    };

    let mut metrics = JsonlAppender::open(&metrics_path)?;
    let started = Instant::now();
    let per_iter = cfg.batch_size * cfg.grad_accum;
    let mut summary = TrainSummary {
        start_iter: start,
        final_iter: start,
        losses: Vec::new(),
        checkpoints: Vec::new(),
        adapters: adapters.clone(),
    };
    for iter in start + 1..=cfg.max_iters {
        let batch: Vec<TrainExample> = (0..per_iter)
            .map(|_| examples[rng.random_range(0..examples.len())].clone())
            .collect();
        let lr = cfg.lr_at(iter);
        let stats: StepStats = match train_step(
            backbone,
            &mut adapters,
            &mut opt,
            policy,
            &batch,
            cfg,
            lr,
            &mut rng,
        ) {
            Ok(s) => s,
            Err(e) => {
                let diag = serde_json::json!({
                    "iter": iter,
                    "batch": batch.iter().map(|b| b.id.as_str()).collect::<Vec<_>>(),
                    "error": e.to_string(),
                });
                write_atomic(
                    &out_dir.join("diagnostics.json"),
                    diag.to_string().as_bytes(),
                )?;
                return Err(e);
            }
        };
        metrics.append(&MetricsRow {
            iter,
            loss: stats.loss,
            omega_term: stats.omega_term,
            base_term: stats.base_term,
            lr,
            wallclock: started.elapsed().as_secs_f64(),
        })?;
        summary.losses.push(stats.loss);
        summary.final_iter = iter;
        if iter % cfg.checkpoint_every == 0 || iter == cfg.max_iters {
            let ckpt = TrainCheckpoint {
                version: ADAPTER_CHECKPOINT_VERSION,
                schedule: adapters.schedule.clone(),
                config: adapters.config.clone(),
                tensors: adapters.params.clone(),
                train: TrainProgress {
                    iter,
                    config: cfg.clone(),
                    optimizer: opt.clone(),
                    rng: RngState::capture(&rng),
                },
            };
            let path = checkpoint_path(out_dir, iter);
            write_atomic(&path, &serde_json::to_vec(&ckpt)?)?;
            summary.checkpoints.push(path);
        }
    }
    summary.adapters = adapters;
    Ok(summary)
}
