//! Building (image, mask, caption) training triples with model clients.

mod build;
mod clients;

pub use build::{
    build_training_set, read_detections, sample_id, DetectionRecord, PrepConfig, PrepQuarantine,
    PrepReport,
};
pub use clients::{
    caption_batch, caption_image, segment_smoke, strip_patterns, BBoxPrompt, BoxSegmenter,
    CaptionClient, FixedCaptioner, SegmentationClient,
};
