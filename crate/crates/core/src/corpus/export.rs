//! Detection dataset export: `images/`, `labels/`, split lists and an index.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bbox::{largest_component_bbox, Connectivity};
use super::mask::{BinaryMask, DEFAULT_THRESHOLD};
use super::sample::{resolve, write_atomic, Manifest, Split};
use super::yolo::{format_label_file, to_yolo_label, DetectionLabel, SMOKE_CLASS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub threshold: u8,
    pub connectivity: Connectivity,
    pub class_id: u32,
    pub class_name: String,
    pub jpeg_quality: u8,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            connectivity: Connectivity::Eight,
            class_id: SMOKE_CLASS,
            class_name: "smoke".into(),
            jpeg_quality: 95,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub images: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Label for a mask drawn on an image of the same size: the box of the
/// largest connected region. Empty masks give no label.
pub fn label_for_mask(
    mask: &BinaryMask,
    connectivity: Connectivity,
    class_id: u32,
) -> Result<Option<DetectionLabel>> {
    match largest_component_bbox(mask, connectivity) {
        Ok(rect) => to_yolo_label(rect, mask.width(), mask.height(), class_id).map(Some),
        Err(Error::NoForeground) => Ok(None),
        Err(e) => Err(e),
    }
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes the manifest as a detection dataset under `out_dir`.
///
/// Images are re-encoded as JPEG. Samples without a mask (or with an empty
/// mask) get an empty label file.
pub fn export_yolo(
    manifest: &Manifest,
    base: &Path,
    out_dir: &Path,
    cfg: &ExportConfig,
) -> Result<ExportSummary> {
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    for d in [&images_dir, &labels_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut summary = ExportSummary::default();
    let mut splits: [(Split, Vec<PathBuf>); 3] = [
        (Split::Train, Vec::new()),
        (Split::Val, Vec::new()),
        (Split::Test, Vec::new()),
    ];

    for rec in &manifest.records {
        let stem = file_stem(&rec.id);
        let image = image::open(resolve(base, &rec.image_path))?.into_rgb8();
        let (w, h) = (image.width() as usize, image.height() as usize);

        let label = match &rec.mask_path {
            Some(p) => {
                let mask = BinaryMask::load(&resolve(base, p), cfg.threshold)?;
                if mask.dims() != (w, h) {
                    return Err(Error::invalid(format!(
                        "{}: mask {:?} does not match image {w}x{h}",
                        rec.id,
                        mask.dims()
                    )));
                }
                label_for_mask(&mask, cfg.connectivity, cfg.class_id)?
            }
            None => None,
        };
        match label {
            Some(_) => summary.positives += 1,
            None => summary.negatives += 1,
        }

        let image_rel = PathBuf::from("images").join(format!("{stem}.jpg"));
        let out_image = out_dir.join(&image_rel);
        let file = fs::File::create(&out_image).map_err(|e| Error::io(&out_image, e))?;
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(
            std::io::BufWriter::new(file),
            cfg.jpeg_quality,
        );
        enc.encode_image(&image)?;

        let labels: Vec<DetectionLabel> = label.into_iter().collect();
        write_atomic(
            &labels_dir.join(format!("{stem}.txt")),
            format_label_file(&labels).as_bytes(),
        )?;

        if let Some((_, list)) = splits.iter_mut().find(|(s, _)| *s == rec.split) {
            list.push(image_rel);
        }
        summary.images += 1;
    }

    for (split, list) in &splits {
        let mut text = String::new();
        for p in list {
            let _ = writeln!(text, "{}", p.display());
        }
        write_atomic(
            &out_dir.join(format!("{}.txt", split.as_str())),
            text.as_bytes(),
        )?;
    }

    let index = format!(
        "path: .\ntrain: train.txt\nval: val.txt\ntest: test.txt\nnc: 1\nnames:\n  {}: {}\n",
        cfg.class_id, cfg.class_name
    );
    write_atomic(&out_dir.join("dataset.yaml"), index.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_filesystem_safe() {
        assert_eq!(file_stem("bg/001 a"), "bg_001_a");
        assert_eq!(file_stem("s-1_2.x"), "s-1_2.x");
    }

    #[test]
    fn empty_mask_has_no_label() {
        let m = BinaryMask::zeros(5, 5);
        assert_eq!(label_for_mask(&m, Connectivity::Eight, 0).unwrap(), None);
        let m = BinaryMask::from_rect(10, 10, 2, 2, 4, 4);
        let l = label_for_mask(&m, Connectivity::Eight, 0).unwrap().unwrap();
        assert_eq!(l.to_line(), "0 0.400000 0.400000 0.400000 0.400000");
    }
}
