use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PanError {
    /// Shapes, extents or architecture settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid use of an API (wrong model kind, non-scalar loss, bad index).
    #[error("usage error: {0}")]
    Usage(String),
    /// Values outside the domain of the data (labels, counts).
    #[error("data error: {0}")]
    Data(String),
    /// A binary file does not follow its declared layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Violated numeric precondition or non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PanError {
    pub fn config(msg: impl Into<String>) -> Self {
        PanError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        PanError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        PanError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        PanError::Numeric(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        PanError::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PanError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            PanError::Config(_) | PanError::Usage(_) => 1,
            PanError::Data(_) | PanError::Format { .. } | PanError::Io { .. } => 2,
            PanError::Numeric(_) => 3,
        }
    }
}
