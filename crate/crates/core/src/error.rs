use std::path::PathBuf;

use thiserror::Error;

/// Malformed binary container. Every variant names the byte offset at which
/// the reader gave up.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    BadVersion {
        offset: u64,
        expected: u32,
        found: u32,
    },
    #[error(
        "truncated container at byte {offset}: needed {needed} more bytes, {available} available"
    )]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("size mismatch at byte {offset}: header implies {expected} payload bytes, file has {actual}")]
    SizeMismatch {
        offset: u64,
        expected: u64,
        actual: u64,
    },
    #[error("invalid tensor name at byte {offset}: not UTF-8")]
    InvalidName { offset: u64 },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: u64 },
}

#[derive(Debug, Error)]
pub enum HasdError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("checkpoint schema: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl HasdError {
    pub fn arg(msg: impl Into<String>) -> Self {
        HasdError::Argument(msg.into())
    }

    pub fn numeric(iteration: usize, msg: impl Into<String>) -> Self {
        HasdError::Numeric {
            iteration,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HasdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Format-level error payload, if this is one.
    pub fn format_error(&self) -> Option<&FormatError> {
        match self {
            HasdError::Format { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, HasdError>;
