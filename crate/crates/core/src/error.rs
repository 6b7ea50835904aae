use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate special token `{0}`")]
    DuplicateSpecial(String),

    #[error("invalid base token `{0}`: {1}")]
    InvalidToken(String, &'static str),

    #[error("out-of-vocabulary surface form `{0}`")]
    OutOfVocabulary(String),

    #[error("token id {0} is outside the vocabulary (size {1})")]
    InvalidTokenId(usize, usize),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    #[error("contrastive triple has an empty {0} set")]
    EmptySampleSet(&'static str),

    #[error("decode cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown document `{0}`")]
    UnknownDocument(String),

    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),

    #[error("overlapping or out-of-order mention spans at {0}..{1}")]
    OverlappingSpans(usize, usize),

    #[error("mention span {0}..{1} lies outside the sentence (length {2})")]
    SpanOutOfBounds(usize, usize, usize),

    #[error("negative window ({lo}, {hi}) is invalid for a corpus of {size}")]
    InvalidWindow { lo: usize, hi: usize, size: usize },

    #[error("requested {count} negatives but the window only holds {available}")]
    CountExceedsWindow { count: usize, available: usize },

    #[error("window excludes all non-positives")]
    WindowExcludesAll,

    #[error("dataset validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("document `{doc_id}` needs {len} positions but max_seq_len is {max}")]
    DocumentTooLong { doc_id: String, len: usize, max: usize },

    #[error("empty index")]
    EmptyIndex,

    #[error("{what}: bad magic or truncated file")]
    BadFormat { what: &'static str },

    #[error("{what}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{0}: checksum mismatch")]
    Checksum(&'static str),

    #[error("checkpoint vocabulary size N={found} does not match expected N={expected}")]
    VocabSizeMismatch { found: usize, expected: usize },

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_)
            | Error::ZeroNorm(_)
            | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::InvalidConfig(_) | Error::InvalidHyper(_) => ErrorKind::Usage,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
