// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can go wrong inside the toolkit.
///
/// Variants are grouped by the exit code the CLI maps them to; see
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // -- data / format errors (exit code 2) --
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("declared tensor size overflows: {0}")]
    SizeOverflow(String),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid tap kind tag {0}")]
    InvalidTap(u8),

    #[error("invalid UTF-8 in {0}")]
    Utf8(&'static str),

    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),

    #[error("raw score {value} for `{construct}` is outside 1..=5")]
    ScoreOutOfRange { construct: String, value: i64 },

    #[error("label file line {line}: {message}")]
    LabelRecord { line: usize, message: String },

    #[error("unknown construct `{0}`")]
    UnknownConstruct(String),

    #[error("cannot stratify: class {class} has {count} member(s), need at least 2")]
    Stratify { class: u8, count: usize },

    #[error("labels contain a single class; both classes are required")]
    SingleClass,

    #[error("empty group")]
    EmptyGroup,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("review text tokenizes to zero tokens")]
    EmptyReview,

    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("LoRA rank {rank} must be < min(in, out) = {limit} for `{target}`")]
    DegenerateRank {
        target: String,
        rank: usize,
        limit: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    // -- numerical failures (exit code 3) --
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite features in column {column}")]
    NonFiniteFeatures { column: usize },

    // -- usage (exit code 1) --
    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 usage, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } | Error::NonFiniteFeatures { .. } => 3,
            Error::Sample { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
