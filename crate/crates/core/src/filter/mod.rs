//! Curation: weighted multimodal scores and top-fraction selection.

mod finetune;
mod run;
mod score;
mod scorer;
mod select;

pub use finetune::{
    assemble_finetune_set, format_response, parse_response, FinetuneRecord, FinetuneSummary,
};
pub use run::{score_candidates, ScoreConfig};
pub use score::{weighted_score, ScoreRecord, Scorer, SCORE_MAX, WEIGHTS_TENTHS};
pub use scorer::{luma, MockScorer, ScorerClient, DEFAULT_SCORING_PROMPT};
pub use select::{keep_count, rank_order, select_top, selected_manifest};
