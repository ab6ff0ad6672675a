//! YOLO-style detection labels: `class_id cx cy w h`, normalized to the image.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bbox::PixelRect;
use crate::error::{Error, Result};

/// Class id for smoke in exported datasets.
pub const SMOKE_CLASS: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLabel {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionLabel {
    /// Checks the unit-square invariants.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        let centered = (0.0..=1.0).contains(&self.cx) && (0.0..=1.0).contains(&self.cy);
        let sized = self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0;
        // Six-decimal text rounding can push an edge past 1 by under 1e-6.
        const EPS: f64 = 1e-6;
        let inside = self.cx - self.w / 2.0 >= -EPS
            && self.cx + self.w / 2.0 <= 1.0 + EPS
            && self.cy - self.h / 2.0 >= -EPS
            && self.cy + self.h / 2.0 <= 1.0 + EPS;
        if finite && centered && sized && inside {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "label outside the unit square: {self:?}"
            )))
        }
    }

    /// Maps back to pixel coordinates, rounding to the nearest pixel.
    pub fn to_pixel_rect(&self, image_w: usize, image_h: usize) -> PixelRect {
        let w = self.w * image_w as f64;
        let h = self.h * image_h as f64;
        let x0 = self.cx * image_w as f64 - w / 2.0;
        let y0 = self.cy * image_h as f64 - h / 2.0;
        PixelRect::new(
            x0.round().max(0.0) as usize,
            y0.round().max(0.0) as usize,
            w.round() as usize,
            h.round() as usize,
        )
    }

    /// One label line with 6-decimal fixed precision.
    pub fn to_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::invalid(format!(
                "expected 5 fields in label line {line:?}"
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number {s:?}: {e}")))
        };
        let class_id = parts[0]
            .parse::<u32>()
            .map_err(|e| Error::invalid(format!("bad class id {:?}: {e}", parts[0])))?;
        let label = DetectionLabel {
            class_id,
            cx: num(parts[1])?,
            cy: num(parts[2])?,
            w: num(parts[3])?,
            h: num(parts[4])?,
        };
        label.validate()?;
        Ok(label)
    }
}

/// Normalizes a pixel bbox against the image size.
pub fn to_yolo_label(
    bbox: PixelRect,
    image_w: usize,
    image_h: usize,
    class_id: u32,
) -> Result<DetectionLabel> {
    if !bbox.fits_in(image_w, image_h) {
        return Err(Error::invalid(format!(
            "bbox {bbox:?} does not fit in {image_w}x{image_h}"
        )));
    }
    let (iw, ih) = (image_w as f64, image_h as f64);
    let label = DetectionLabel {
        class_id,
        cx: (bbox.x0 as f64 + bbox.w as f64 / 2.0) / iw,
        cy: (bbox.y0 as f64 + bbox.h as f64 / 2.0) / ih,
        w: bbox.w as f64 / iw,
        h: bbox.h as f64 / ih,
    };
    Ok(label)
}

/// Contents of a label file: one line per object, each newline-terminated.
/// Negative samples produce an empty string.
pub fn format_label_file(labels: &[DetectionLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{}", l.to_line());
    }
    out
}

pub fn parse_label_file(text: &str) -> Result<Vec<DetectionLabel>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(DetectionLabel::parse_line)
        .collect()
}
