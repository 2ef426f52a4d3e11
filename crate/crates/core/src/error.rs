use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: row {index} has zero norm")]
    DegenerateEmbedding { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid value for `{name}`: {reason}")]
    InvalidValue { name: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("zero dimension in header of {path}: {field} = 0")]
    ZeroDimension { path: PathBuf, field: &'static str },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unknown pooling strategy `{0}`")]
    UnknownStrategy(String),

    #[error("unknown objective `{0}`")]
    UnknownObjective(String),

    #[error("strategy `{0}` has no layer attention to report")]
    NoAttention(String),

    #[error("corpus does not match objective `{objective}`: {reason}")]
    CorpusMismatch { objective: String, reason: String },

    #[error("zero variance in {0}; correlation is undefined")]
    ZeroVariance(&'static str),

    #[error("unknown text (not present in frozen feature set): {0:?}")]
    UnknownText(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed record at {path}:{line}: {reason}")]
    Record { path: PathBuf, line: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidValue { name, reason: reason.into() }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    /// Stable short identifier used in single-line CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DegenerateEmbedding { .. } => "degenerate_embedding",
            Error::EmptyInput(_) => "empty_input",
            Error::InvalidValue { .. } => "invalid_value",
            Error::NonFinite(_) => "non_finite",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::ZeroDimension { .. } => "zero_dimension",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::UnknownStrategy(_) => "unknown_strategy",
            Error::UnknownObjective(_) => "unknown_objective",
            Error::NoAttention(_) => "no_attention",
            Error::CorpusMismatch { .. } => "corpus_mismatch",
            Error::ZeroVariance(_) => "zero_variance",
            Error::UnknownText(_) => "unknown_text",
            Error::Config { .. } => "config",
            Error::Record { .. } => "record",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
