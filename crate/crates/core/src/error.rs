// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal measure {off_diagonal:e})")]
    SvdNonConvergence { sweeps: usize, off_diagonal: f64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds context window {n_ctx}")]
    SequenceTooLong { len: usize, n_ctx: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("conflicting interventions on {0}")]
    ConflictingInterventions(String),

    #[error("missing cache entry: {0}")]
    MissingCache(String),

    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("permutation cache {path}: {reason}")]
    PermutationCache { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint {path}: truncated (expected {expected} bytes, found {found})")]
    CheckpointTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint {path}: tensor {tensor} has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        path: PathBuf,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("undefined patching baseline: clean and corrupted logit differences are equal ({0:e})")]
    UndefinedBaseline(f64),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
