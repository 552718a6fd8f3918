//! Crate-wide error type with stable error codes for CLI reporting.

use std::path::PathBuf;

/// Errors produced by any pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0} non-finite")]
    NonFinite(String),

    #[error("{0}")]
    Data(String),
}

impl Error {
    /// Stable short code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IDC-IO",
            Error::Parse { .. } => "IDC-PARSE",
            Error::Config(_) => "IDC-CONFIG",
            Error::Shape(_) => "IDC-SHAPE",
            Error::NonFinite(_) => "IDC-NUMERIC",
            Error::Data(_) => "IDC-DATA",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
