use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("k-core eliminated all data (k = {0})")]
    KCoreEmpty(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("{count} required id(s) missing from embedding file, first: {}", .first.join(", "))]
    MissingIds { count: usize, first: Vec<String> },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("index out of range: {kind} {index} (count {count})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        count: usize,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("no evaluable users in {0}")]
    EmptyReport(String),

    #[error("model/data mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
