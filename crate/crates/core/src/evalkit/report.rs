//! Paired evaluation of generated images against references.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::metrics::{mse_img, psnr, ssim, SsimConfig};
use crate::corpus::{resolve, BinaryMask, Manifest, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};

/// Learned perceptual distance between two images.
pub trait LpipsClient {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// Image-text alignment score.
pub trait ClipClient {
    fn similarity(&self, image: &RgbImage, text: &str) -> Result<f64>;
}

/// Client value, checked to be finite and non-negative.
pub fn lpips(a: &RgbImage, b: &RgbImage, client: &dyn LpipsClient) -> Result<f64> {
    let d = client.distance(a, b)?;
    if !d.is_finite() || d < 0.0 {
        return Err(Error::invalid(format!("lpips client returned {d}")));
    }
    Ok(d)
}

pub fn clip_sim(image: &RgbImage, text: &str, client: &dyn ClipClient) -> Result<f64> {
    let s = client.similarity(image, text)?;
    if !s.is_finite() {
        return Err(Error::invalid(format!("clip client returned {s}")));
    }
    Ok(s)
}

/// PSNR in JSON: a number, or the string `"inf"` for identical images.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad dB value {s:?}"))),
        }
    }
}

mod db_opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(v) => db::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "db")] f64);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipsim: Option<f64>,
}

/// Means over rows; client metrics only over rows that have them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rows: usize,
    /// Mean over finite rows; `"inf"` when every row is identical.
    #[serde(with = "db_opt")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub lpips_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipsim: Option<f64>,
    pub clipsim_rows: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRegion {
    #[default]
    Full,
    /// Only pixels inside each generated sample's mask.
    Masked,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ssim: SsimConfig,
    pub region: EvalRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
    pub excluded: Vec<Exclusion>,
    /// Client failures; the metric is absent on the affected rows.
    pub notes: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl Aggregate {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let psnr = match mean(rows.iter().map(|r| r.psnr).filter(|v| v.is_finite())) {
            None if !rows.is_empty() => Some(f64::INFINITY),
            m => m,
        };
        Self {
            rows: rows.len(),
            psnr,
            ssim: mean(rows.iter().map(|r| r.ssim)),
            mse: mean(rows.iter().map(|r| r.mse)),
            lpips: mean(rows.iter().filter_map(|r| r.lpips)),
            lpips_rows: rows.iter().filter(|r| r.lpips.is_some()).count(),
            clipsim: mean(rows.iter().filter_map(|r| r.clipsim)),
            clipsim_rows: rows.iter().filter(|r| r.clipsim.is_some()).count(),
        }
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One line per row; absent client metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("id,psnr,ssim,mse,lpips,clipsim\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.id,
                fmt_db(r.psnr),
                r.ssim,
                r.mse,
                opt(r.lpips),
                opt(r.clipsim)
            );
        }
        out
    }
}

#[derive(Default, Clone, Copy)]
pub struct EvalClients<'a> {
    pub lpips: Option<&'a dyn LpipsClient>,
    pub clip: Option<&'a dyn ClipClient>,
}

/// Compares each generated record with the reference of the same id.
///
/// Rows follow the generated manifest order. Ids present on only one side,
/// and pairs that cannot be compared, are listed in `excluded`.
pub fn evaluate_pairs(
    generated: &Manifest,
    generated_base: &Path,
    reference: &Manifest,
    reference_base: &Path,
    clients: EvalClients<'_>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let refs: HashMap<&str, _> = reference
        .records
        .iter()
        .map(|r| (r.id.as_str(), r))
        .collect();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    let mut notes = Vec::new();
    for g in &generated.records {
        let Some(r) = refs.get(g.id.as_str()) else {
            excluded.push(Exclusion {
                id: g.id.clone(),
                reason: "no reference with this id".into(),
            });
            continue;
        };
        let row = (|| -> Result<EvalRow> {
            let a = image::open(resolve(generated_base, &g.image_path))?.to_rgb8();
            let b = image::open(resolve(reference_base, &r.image_path))?.to_rgb8();
            let region = match cfg.region {
                EvalRegion::Full => None,
                EvalRegion::Masked => {
                    let p = g
                        .mask_path
                        .as_ref()
                        .ok_or_else(|| Error::invalid("masked evaluation needs a mask"))?;
                    let m = BinaryMask::load(&resolve(generated_base, p), DEFAULT_THRESHOLD)?;
                    Some(m.resize_nearest(a.width() as usize, a.height() as usize))
                }
            };
            let mut row = EvalRow {
                id: g.id.clone(),
                psnr: psnr(&a, &b, region.as_ref())?,
                ssim: ssim(&a, &b, &cfg.ssim, region.as_ref())?,
                mse: mse_img(&a, &b, region.as_ref())?,
                lpips: None,
                clipsim: None,
            };
            if let Some(c) = clients.lpips {
                match lpips(&a, &b, c) {
                    Ok(v) => row.lpips = Some(v),
                    Err(e) => notes.push(format!("{}: lpips unavailable: {e}", g.id)),
                }
            }
            if let Some(c) = clients.clip {
                match clip_sim(&a, &g.caption, c) {
                    Ok(v) => row.clipsim = Some(v),
                    Err(e) => notes.push(format!("{}: clipsim unavailable: {e}", g.id)),
                }
            }
            Ok(row)
        })();
        match row {
            Ok(row) => rows.push(row),
            Err(e) => excluded.push(Exclusion {
                id: g.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let seen: std::collections::HashSet<&str> =
        generated.records.iter().map(|g| g.id.as_str()).collect();
    for r in &reference.records {
        if !seen.contains(r.id.as_str()) {
            excluded.push(Exclusion {
                id: r.id.clone(),
                reason: "no generated image with this id".into(),
            });
        }
    }
    if clients.lpips.is_none() {
        notes.push("lpips: no client configured".into());
    }
    if clients.clip.is_none() {
        notes.push("clipsim: no client configured".into());
    }
    Ok(EvalReport {
        config: cfg.clone(),
        aggregate: Aggregate::from_rows(&rows),
        rows,
        excluded,
        notes,
    })
}
