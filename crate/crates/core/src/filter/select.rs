//! Ranking and top-fraction selection.

use std::cmp::Ordering;

use super::score::ScoreRecord;
use crate::corpus::Manifest;
use crate::error::{Error, Result};

/// Weighted total descending, then sample id ascending.
pub fn rank_order(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    b.weighted
        .total_cmp(&a.weighted)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// `ceil(fraction·n)`, ignoring floating-point excess below one part in 10⁹
/// (so `0.3 · 10` keeps 3, not 4).
pub fn keep_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let x = fraction * n as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize;
    Ok(if n == 0 { 0 } else { k.clamp(1, n) })
}

/// The top `ceil(fraction·N)` records in rank order.
pub fn select_top(records: &[ScoreRecord], fraction: f64) -> Result<Vec<ScoreRecord>> {
    let k = keep_count(records.len(), fraction)?;
    if records.is_empty() {
        log::warn!("no score records to select from");
        return Ok(Vec::new());
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(rank_order);
    sorted.truncate(k);
    Ok(sorted)
}

/// Manifest records for `selection`, in selection order.
pub fn selected_manifest(selection: &[ScoreRecord], manifest: &Manifest) -> Result<Manifest> {
    let by_id: std::collections::HashMap<&str, _> = manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r))
        .collect();
    selection
        .iter()
        .map(|s| {
            by_id
                .get(s.sample_id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "scored sample {} is not in the manifest",
                        s.sample_id
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()
        .map(Manifest::new)
}
