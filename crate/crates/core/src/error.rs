use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },
    #[error("{what}: format version {found} is not supported (expected {expected})")]
    Version { what: String, found: u64, expected: u64 },
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },
    #[error("non-finite {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl AsRef<Path>, source: std::io::Error) -> Error {
    Error::Io { path: path.as_ref().to_path_buf(), source }
}

pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Invalid { what: what.into(), reason: reason.into() }
}
