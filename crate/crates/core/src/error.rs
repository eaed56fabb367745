use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum IcpaError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("source {source_id}: edge endpoint {node} does not exist")]
    DanglingEndpoint { source_id: usize, node: usize },

    #[error("category {category} out of range (K = {num_categories})")]
    CategoryOutOfRange {
        category: usize,
        num_categories: usize,
    },

    #[error("source {source_id}: unknown node {node}")]
    UnknownNode { source_id: usize, node: usize },

    #[error("source {source_id}: unknown feature {feature}")]
    UnknownFeature { source_id: usize, feature: u64 },

    #[error("source {0} does not exist")]
    UnknownSource(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("no negative candidates: category {category} of source {source_id} holds only the positive")]
    NoNegatives { source_id: usize, category: usize },

    #[error("coordinate {index} is below the baseline ({value} < {baseline})")]
    BelowBaseline {
        index: usize,
        value: f64,
        baseline: f64,
    },

    #[error("gate value {0} is outside the open interval (0, 1)")]
    GateOutOfRange(f64),

    #[error("non-finite parameter in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = IcpaError> = std::result::Result<T, E>;
