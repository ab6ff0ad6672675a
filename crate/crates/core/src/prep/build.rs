//! Resumable construction of (image, mask, caption) triples from detection data.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::clients::{caption_image, segment_smoke, BBoxPrompt, CaptionClient, SegmentationClient};
use crate::corpus::{read_jsonl, resolve, JsonlAppender, Manifest, SmokeSample, Source, Split};
use crate::error::{Error, Result};

/// One annotated detection image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub bboxes: Vec<BBoxPrompt>,
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    if !path.exists() {
        return Err(Error::invalid(format!("{} does not exist", path.display())));
    }
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub max_tokens: usize,
    /// Phrases removed from captions (case-insensitive, whole words).
    pub stop_patterns: Vec<String>,
    /// Extra segmentation attempts after a transport failure.
    pub retries: usize,
    pub split: Split,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            max_tokens: 20,
            stop_patterns: Vec::new(),
            retries: 1,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepQuarantine {
    pub id: String,
    pub image_id: String,
    pub reason: String,
    /// Transport failures are attempted again on the next run.
    pub retryable: bool,
    /// Unix seconds.
    pub at: u64,
}

#[derive(Debug, Clone)]
pub struct PrepReport {
    pub added: usize,
    pub skipped: usize,
    pub quarantined: Vec<PrepQuarantine>,
    /// Every record in the output manifest, old and new.
    pub manifest: Manifest,
}

pub fn sample_id(image_id: &str, bbox: usize) -> String {
    format!("{image_id}-b{bbox}")
}

fn with_retries<T>(retries: usize, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match f() {
            Err(e) if e.is_retryable() && attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

/// Builds one sample per (image, box) into `out_dir`.
///
/// Appends to `out_dir/manifest.jsonl` and `out_dir/quarantine.jsonl` and
/// writes masks under `out_dir/masks/`. Ids already in the manifest or
/// quarantined for a non-transport reason are skipped, so an interrupted run
/// can simply be repeated.
pub fn build_training_set(
    detections: &[DetectionRecord],
    base: &Path,
    seg: &dyn SegmentationClient,
    cap: &dyn CaptionClient,
    cfg: &PrepConfig,
    out_dir: &Path,
) -> Result<PrepReport> {
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let quarantine_path = out_dir.join("quarantine.jsonl");
    let mut existing: Vec<SmokeSample> = read_jsonl(&manifest_path)?;
    let old_q: Vec<PrepQuarantine> = read_jsonl(&quarantine_path)?;
    let mut done: HashSet<String> = existing.iter().map(|r| r.id.clone()).collect();
    done.extend(old_q.iter().filter(|q| !q.retryable).map(|q| q.id.clone()));

    let mut manifest = JsonlAppender::open(&manifest_path)?;
    let mut quarantine = JsonlAppender::open(&quarantine_path)?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut report = PrepReport {
        added: 0,
        skipped: 0,
        quarantined: Vec::new(),
        manifest: Manifest::default(),
    };
    let flag = |q: &mut JsonlAppender,
                report: &mut PrepReport,
                id: String,
                image_id: &str,
                e: &Error|
     -> Result<()> {
        log::warn!("quarantining {id}: {e}");
        let entry = PrepQuarantine {
            id,
            image_id: image_id.to_string(),
            reason: e.to_string(),
            retryable: e.is_retryable(),
            at: now,
        };
        q.append(&entry)?;
        report.quarantined.push(entry);
        Ok(())
    };

    for det in detections {
        if det.bboxes.is_empty() {
            let id = sample_id(&det.id, 0);
            if !done.contains(&id) {
                flag(
                    &mut quarantine,
                    &mut report,
                    id,
                    &det.id,
                    &Error::invalid("record has no bounding boxes"),
                )?;
            }
            continue;
        }
        let ids: Vec<String> = (0..det.bboxes.len())
            .map(|k| sample_id(&det.id, k))
            .collect();
        if ids.iter().all(|id| done.contains(id)) {
            report.skipped += ids.len();
            continue;
        }
        let image_path = resolve(base, &det.image_path);
        let image = match image::open(&image_path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                let e = Error::from(e);
                for id in ids.into_iter().filter(|id| !done.contains(id)) {
                    flag(&mut quarantine, &mut report, id, &det.id, &e)?;
                }
                continue;
            }
        };
        let mut caption: Option<Result<String>> = None;
        for (k, prompt) in det.bboxes.iter().enumerate() {
            let id = ids[k].clone();
            if done.contains(&id) {
                report.skipped += 1;
                continue;
            }
            let mask = match with_retries(cfg.retries, || segment_smoke(&image, prompt, seg)) {
                Ok(m) => m,
                Err(e) => {
                    flag(&mut quarantine, &mut report, id, &det.id, &e)?;
                    continue;
                }
            };
            let text = caption.get_or_insert_with(|| {
                with_retries(cfg.retries, || {
                    caption_image(&image, cap, cfg.max_tokens, &cfg.stop_patterns)
                })
            });
            let text = match text {
                Ok(t) => t.clone(),
                Err(e) => {
                    flag(&mut quarantine, &mut report, id, &det.id, e)?;
                    continue;
                }
            };
            let mask_rel = PathBuf::from("masks").join(format!("{id}.png"));
            mask.save_png(&out_dir.join(&mask_rel))?;
            let rec = SmokeSample {
                id: id.clone(),
                image_path: image_path.clone(),
                mask_path: Some(mask_rel),
                caption: text,
                source: Source::Real,
                split: cfg.split,
            };
            manifest.append(&rec)?;
            done.insert(id);
            existing.push(rec);
            report.added += 1;
        }
    }
    report.manifest = Manifest::new(existing);
    Ok(report)
}
