//! Adapter training over a frozen backbone.

mod backbone;
mod config;
mod freeze;
mod optim;
mod run;
mod step;
pub mod toy;

pub use backbone::{Backbone, TrainExample};
pub use config::{AdamWConfig, TrainConfig};
pub use freeze::{verify_freeze, FreezePolicy, FreezeReport};
pub use optim::AdamW;
pub use run::{
    checkpoint_dir, checkpoint_path, latest_checkpoint, run_training, MetricsRow, ResumeMode,
    RngState, TrainCheckpoint, TrainProgress, TrainSummary,
};
pub use step::{draw_sample, sample_loss, train_step, SampleDraw, SampleLoss, StepStats};
