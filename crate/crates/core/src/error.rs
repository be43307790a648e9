use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Grids do not share an extent, or do not overlap at all.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    /// A caller broke an operation's precondition (e.g. a non-perpendicular transect).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by bad inputs (as opposed to numeric or runtime trouble).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Alignment(_)
                | Error::Shape(_)
                | Error::Ingest(_)
                | Error::Invalid(_)
                | Error::Format { .. }
                | Error::Io { .. }
        )
    }
}
