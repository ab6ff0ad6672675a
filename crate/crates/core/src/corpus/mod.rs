//! Data model, manifests, mask utilities and detection-label export.

mod bbox;
mod export;
mod mask;
mod mix;
mod sample;
mod yolo;

pub use bbox::{largest_component_bbox, Connectivity, PixelRect};
pub use export::{export_yolo, label_for_mask, ExportConfig, ExportSummary};
pub use mask::{binarize_mask, BinaryMask, DEFAULT_THRESHOLD};
pub use mix::{mix_datasets, Ratio};
pub use sample::{
    read_jsonl, resolve, validate_manifest, write_atomic, JsonlAppender, Manifest, SmokeSample,
    Source, Split, Violation, MANIFEST_SCHEMA_VERSION,
};
pub use yolo::{format_label_file, parse_label_file, to_yolo_label, DetectionLabel, SMOKE_CLASS};
