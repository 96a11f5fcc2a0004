//! Training, evaluation, ablation, and CLI plumbing.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod evaluate;
pub mod gradcheck_suite;
pub mod heatmap;
pub mod train;

pub use ablate::{ablate, AblationReport, TogglePatch, VariantSpec};
pub use config::RunConfig;
pub use evaluate::{evaluate_split, score_records, PredictionRecord};
pub use heatmap::{block_contrast, emit_heatmap, HeatmapStage};
pub use train::{train, Checkpoint, TrainResult};
