use thiserror::Error;

use crate::image::ImageError;
use crate::toyworld::ToyworldError;

/// Failures of the model-side modules (encoder, generator, focus supervision, metrics).
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("instruction has {placeholders} image placeholders but {refs} references were given")]
    RefCount { placeholders: usize, refs: usize },
    #[error("pose has {got} tokens, noisy segment has {expected}")]
    PoseTokens { expected: usize, got: usize },
    #[error("reference index {index} out of range ({refs} references)")]
    RefIndex { index: usize, refs: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("no attention maps to supervise")]
    EmptyMaps,
    #[error("attention map has zero mass")]
    ZeroMass,
    #[error(transparent)]
    Toyworld(#[from] ToyworldError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
