//! Instruction-tuning records from human annotations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::score::ScoreRecord;
use crate::corpus::{resolve, write_atomic, Manifest};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub image_path: PathBuf,
    pub prompt: String,
    pub response: String,
}

/// Target answer in the format the scoring prompt asks for.
pub fn format_response(r: &ScoreRecord) -> String {
    format!(
        "color: {}, visibility: {}, semi-transparency: {}",
        r.color, r.visibility, r.translucency
    )
}

/// Parses a [`format_response`] answer back into `[color, visibility, translucency]`.
pub fn parse_response(text: &str) -> Option<[f64; 3]> {
    let mut out = [f64::NAN; 3];
    for part in text.split(',') {
        let (k, v) = part.split_once(':')?;
        let v: f64 = v.trim().parse().ok()?;
        match k.trim().to_lowercase().as_str() {
            "color" => out[0] = v,
            "visibility" => out[1] = v,
            "semi-transparency" | "translucency" => out[2] = v,
            _ => return None,
        }
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FinetuneSummary {
    pub written: usize,
    /// Annotation ids with no manifest record; skipped.
    pub dangling: Vec<String>,
    /// Ids annotated more than once; the last annotation wins.
    pub conflicts: Vec<String>,
}

/// Writes one `{image_path, prompt, response}` line per annotated sample to `out`.
pub fn assemble_finetune_set(
    annotations: &[ScoreRecord],
    manifest: &Manifest,
    base: &Path,
    prompt: &str,
    out: &Path,
) -> Result<FinetuneSummary> {
    let mut summary = FinetuneSummary::default();
    let mut order: Vec<&str> = Vec::new();
    let mut latest: HashMap<&str, &ScoreRecord> = HashMap::new();
    for a in annotations {
        a.validate()?;
        if latest.insert(a.sample_id.as_str(), a).is_some() {
            log::warn!(
                "sample {} annotated more than once; keeping the last",
                a.sample_id
            );
            summary.conflicts.push(a.sample_id.clone());
        } else {
            order.push(a.sample_id.as_str());
        }
    }
    if annotations.is_empty() {
        log::warn!("no annotations; writing an empty fine-tune set");
    }
    let mut text = String::new();
    for id in order {
        let Some(sample) = manifest.get(id) else {
            log::warn!("annotation for unknown sample {id}");
            summary.dangling.push(id.to_string());
            continue;
        };
        let rec = FinetuneRecord {
            image_path: resolve(base, &sample.image_path),
            prompt: prompt.to_string(),
            response: format_response(latest[id]),
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
        summary.written += 1;
    }
    write_atomic(out, text.as_bytes())?;
    Ok(summary)
}
