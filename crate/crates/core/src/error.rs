use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("state error: {0}")]
    State(String),
    #[error("decode error ({container}): {message}")]
    Decode { container: String, message: String },
    #[error("selection error: {0}")]
    Selection(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("compatibility error: {0}")]
    Compat(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Training { epoch: usize, batch: usize, message: String },
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { expected: expected.into(), got: got.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
