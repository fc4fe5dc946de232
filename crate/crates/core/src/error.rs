use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error.
///
/// Variants are grouped by how callers react to them: `Io` and `Database`
/// are environmental, everything else is a validation or contract failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("database error: {0}")]
    Database(#[from] rusqlite::Error),

    #[error("parse error in record {record}: {message}")]
    Parse { record: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("insufficient data: need at least {required}, got {actual} ({what})")]
    InsufficientData {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("backend unavailable: {0}")]
    Backend(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(record: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            record: record.into(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by the environment rather than the input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Database(_) | Error::Backend(_))
    }
}
