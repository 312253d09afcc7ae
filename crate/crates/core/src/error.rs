use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of an input file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record parsed but violates the annotation schema.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("offset out of range: {0}")]
    Range(String),

    /// Data is internally inconsistent (surface mismatch, overlapping spans, dangling ids).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Ill-formed tag or vector sequence; `index` is the first offending position.
    #[error("format error at index {index}: {message}")]
    Format { index: usize, message: String },

    #[error("size error: {0}")]
    Size(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("transport error: {0}")]
    Transport(String),

    /// Embedding vectors do not line up with a Doc's tokens.
    #[error("alignment error for doc {doc_id}: {message}")]
    Alignment { doc_id: String, message: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Prediction and gold sets cannot be paired by id.
    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
