//! Training orchestration, the composite objective, self-synthesis and filtering.

pub mod filter;
mod loss;
pub mod run;
pub mod synth;
mod train;

use thiserror::Error;

use crate::error::ModelError;
use crate::toyworld::{Task, ToyworldError};

pub use loss::{head_mean_value, sample_loss, total_loss, LossReport, LossWeights, SampleLoss};
pub use train::{
    apply_freeze, smoothed_total, train, write_metrics, MetricsRecord, Schedule, TrainConfig, TrainState, TrainingSet,
    STAGE1_TASKS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("task {task} is not trained in stage {stage}")]
    TaskMismatch { task: Task, stage: u8 },
    #[error("non-finite loss or gradient at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Toyworld(#[from] ToyworldError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}
