// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by strace-lab operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: expected {expected}, got {actual} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("distribution is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("bad magic bytes in weight file")]
    BadMagic,

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u8),

    #[error("unexpected end of file")]
    UnexpectedEof,

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{0} contains a non-finite value")]
    NonFinite(String),

    #[error("malformed weight header: {0}")]
    Header(String),

    #[error("incomplete forward record: {0}")]
    IncompleteRecord(String),

    #[error("invalid size grid: {0}")]
    InvalidGrid(String),

    #[error("invalid edge: {0}")]
    InvalidEdge(String),

    #[error("correlation undefined: zero rank variance")]
    UndefinedCorrelation,

    #[error("no qualifying chunk in corpus")]
    NoQualifyingChunk,

    #[error("no matching instance ids")]
    EmptyIntersection,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
