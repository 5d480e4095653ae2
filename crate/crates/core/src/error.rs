use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or images.
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Invalid configuration value (bad rate, zero dims, malformed config file).
    #[error("configuration error: {0}")]
    Config(String),

    /// Coordinates or indices outside the valid region.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN/Inf surfaced where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset manifest or frame files are missing/malformed.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-parsable class name, used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dim { .. } => "dim",
            Error::Config(_) => "config",
            Error::Bounds(_) => "bounds",
            Error::Usage(_) => "usage",
            Error::Numeric(_) => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code chosen by the CLI for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
