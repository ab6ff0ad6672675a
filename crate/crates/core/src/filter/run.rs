//! Scoring a candidate pool with retries, quarantine and resumable output.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::score::ScoreRecord;
use super::scorer::{ScorerClient, DEFAULT_SCORING_PROMPT};
use crate::corpus::{
    resolve, write_atomic, BinaryMask, JsonlAppender, Manifest, SmokeSample, DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub prompt: String,
    /// Extra attempts after a transport failure.
    pub retries: usize,
    pub workers: usize,
    /// Consecutive transport failures (after retries) that abort the run.
    pub outage_after: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            prompt: DEFAULT_SCORING_PROMPT.into(),
            retries: 2,
            workers: 1,
            outage_after: 5,
        }
    }
}

/// Reads a results file written by [`JsonlAppender`], dropping a torn final
/// line left by a crash mid-write. The file is rewritten without it.
fn read_partial(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    let mut clean = String::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScoreRecord>(line.trim_end()) {
            Ok(r) => {
                out.push(r);
                clean.push_str(line.trim_end());
                clean.push('\n');
            }
            Err(_) if i + 1 == lines.len() && !line.ends_with('\n') => {
                log::warn!("{}: dropping torn final line", path.display());
            }
            Err(e) => return Err(Error::invalid(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    if clean.len() != text.len() {
        write_atomic(path, clean.as_bytes())?;
    }
    Ok(out)
}

enum Outcome {
    Scored(ScoreRecord),
    /// Quarantined because the scorer could not be reached.
    Unreachable(ScoreRecord),
}

fn score_one(
    sample: &SmokeSample,
    base: &Path,
    scorer: &dyn ScorerClient,
    cfg: &ScoreConfig,
) -> Outcome {
    let load = || -> Result<(image::RgbImage, Option<BinaryMask>)> {
        let img = image::open(resolve(base, &sample.image_path))?.to_rgb8();
        let mask = match &sample.mask_path {
            Some(p) => {
                let m = BinaryMask::load(&resolve(base, p), DEFAULT_THRESHOLD)?;
                Some(m.resize_nearest(img.width() as usize, img.height() as usize))
            }
            None => None,
        };
        Ok((img, mask))
    };
    let (img, mask) = match load() {
        Ok(v) => v,
        Err(e) => {
            log::warn!("quarantining {}: {e}", sample.id);
            return Outcome::Scored(ScoreRecord::failed(&sample.id, scorer.kind()));
        }
    };
    let mut attempt = 0;
    loop {
        match scorer
            .score(&img, mask.as_ref(), &cfg.prompt)
            .and_then(|s| ScoreRecord::clamped(&sample.id, s, scorer.kind()))
        {
            Ok(r) => {
                if r.clamped {
                    log::warn!("scores for {} clamped into [0, 10]", sample.id);
                }
                return Outcome::Scored(r);
            }
            Err(e) if e.is_retryable() && attempt < cfg.retries => attempt += 1,
            Err(e) => {
                log::warn!("quarantining {}: {e}", sample.id);
                let rec = ScoreRecord::failed(&sample.id, scorer.kind());
                return if e.is_retryable() {
                    Outcome::Unreachable(rec)
                } else {
                    Outcome::Scored(rec)
                };
            }
        }
    }
}

/// Scores every manifest record, appending each result to `results` as it
/// completes.
///
/// Records already in `results` are kept, except quarantined ones, which are
/// scored again. Output follows manifest order. After `outage_after`
/// consecutive unreachable-scorer failures the run stops with a transport
/// error; everything scored so far stays in `results`.
pub fn score_candidates(
    manifest: &Manifest,
    base: &Path,
    scorer: &dyn ScorerClient,
    cfg: &ScoreConfig,
    results: &Path,
) -> Result<Vec<ScoreRecord>> {
    let mut done: HashMap<String, ScoreRecord> = HashMap::new();
    for r in read_partial(results)? {
        done.insert(r.sample_id.clone(), r);
    }
    let pending: Vec<&SmokeSample> = manifest
        .records
        .iter()
        .filter(|s| done.get(&s.id).is_none_or(|r| r.quarantined))
        .collect();

    let writer = Mutex::new((
        JsonlAppender::open(results)?,
        0usize,
        Vec::<ScoreRecord>::new(),
    ));
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() || abort.load(Ordering::SeqCst) {
                    break;
                }
                let outcome = score_one(pending[i], base, scorer, cfg);
                let mut guard = writer.lock().expect("results writer poisoned");
                let (out, streak, fresh) = &mut *guard;
                let rec = match outcome {
                    Outcome::Scored(r) => {
                        *streak = 0;
                        r
                    }
                    Outcome::Unreachable(r) => {
                        *streak += 1;
                        if *streak >= cfg.outage_after.max(1) {
                            abort.store(true, Ordering::SeqCst);
                            *failure.lock().expect("poisoned") = Some(Error::Transport(format!(
                                "scorer unreachable for {streak} consecutive samples; partial results in {}",
                                results.display()
                            )));
                            break;
                        }
                        r
                    }
                };
                if let Err(e) = out.append(&rec) {
                    abort.store(true, Ordering::SeqCst);
                    *failure.lock().expect("poisoned") = Some(e);
                    break;
                }
                fresh.push(rec);
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    for r in writer.into_inner().expect("poisoned").2 {
        done.insert(r.sample_id.clone(), r);
    }
    Ok(manifest
        .records
        .iter()
        .filter_map(|s| done.remove(&s.id))
        .collect())
}
