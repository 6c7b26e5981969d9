use std::path::PathBuf;

use crate::train::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} is {left_shape}, {right} is {right_shape}")]
    Shape {
        left: &'static str,
        left_shape: String,
        right: &'static str,
        right_shape: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {} step {}: loss {}", .0.epoch, .0.step, .0.loss)]
    Diverged(Box<Divergence>),
}

/// Diagnostic attached to an aborted run. The partial record covers every
/// step completed before the offending loss was observed.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub record: RunRecord,
}

impl Error {
    pub(crate) fn shape(
        left: &'static str,
        left_shape: impl std::fmt::Display,
        right: &'static str,
        right_shape: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            left,
            left_shape: left_shape.to_string(),
            right,
            right_shape: right_shape.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        offset: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
