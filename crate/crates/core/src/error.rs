//! Crate-wide error type with coarse categories for CLI exit codes.

use std::path::PathBuf;
use thiserror::Error;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or incompatible settings.
    Config,
    /// Malformed or invalid input data.
    Data,
    /// Everything else (I/O, numeric failures, divergence).
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in conversation `{conv_id}`, field `{field}`: {message}")]
    Parse {
        conv_id: String,
        field: String,
        message: String,
    },

    #[error("validation error in conversation `{conv_id}`: {message}")]
    Validation { conv_id: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("knowledge provider error for turn `{turn_id}`: {message}")]
    Provider { turn_id: String, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on `{path}`: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Incompatible(_) => ErrorCategory::Config,
            Error::Parse { .. } | Error::Validation { .. } | Error::Data(_) => ErrorCategory::Data,
            Error::Dimension(_)
            | Error::NonFinite(_)
            | Error::Provider { .. }
            | Error::Diverged(_)
            | Error::FileNotFound(_)
            | Error::Io { .. }
            | Error::Json { .. } => ErrorCategory::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
