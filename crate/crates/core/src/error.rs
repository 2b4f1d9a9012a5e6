use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the recognition toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("{path}:{line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("source `{source_tag}` has no schema entry for id {id}")]
    UnknownSourceId { source_tag: String, id: i64 },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("encoder `{0}` is already registered")]
    DuplicateEncoder(String),
    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),
    #[error("encoder `{0}` has no weights loaded")]
    WeightsNotLoaded(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature cache: {0}")]
    CacheFormat(String),
    #[error("batch size mismatch: expected {expected}, got {actual}")]
    BatchSizeMismatch { expected: usize, actual: usize },
    #[error("encoder order mismatch: expected {expected:?}, got {actual:?}")]
    EncoderOrderMismatch {
        expected: Vec<String>,
        actual: Vec<String>,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("ensemble weights are all zero")]
    AllZeroWeights,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
