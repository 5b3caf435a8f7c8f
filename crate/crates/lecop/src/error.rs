//! Error type shared across the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed row: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },

    #[error("vector for {id:?} has {found} components, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite component in vector for {id:?}")]
    NonFinite { id: String },

    #[error("{context}: missing ids: {}", format_ids(ids))]
    MissingIds { context: String, ids: Vec<String> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("http error: {message}")]
    Http { message: String, transient: bool },

    #[error("bad file format in {path}: {message}")]
    BadFormat { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::MalformedRow {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}

/// Shows the first few ids so huge coverage failures stay readable.
fn format_ids(ids: &[String]) -> String {
    const SHOW: usize = 8;
    if ids.len() <= SHOW {
        ids.join(", ")
    } else {
        format!("{}, ... ({} total)", ids[..SHOW].join(", "), ids.len())
    }
}
