//! Batch smoke synthesis: caption rewriting, mask pairing and guided inpainting.

mod caption;
mod generate;
mod pairing;

pub use caption::{
    rewrite_caption, CaptionRewriter, RewriteClient, SmokeLexicon, TemplateRewriter,
    REWRITE_RETRIES,
};
pub use generate::{
    generate_batch, pair_seed, recompose, GenConfig, GenerationReport, QuarantineEntry,
};
pub use pairing::{pair_masks, MaskPair};
