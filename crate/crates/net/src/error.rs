use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("version mismatch in field {field}: expected {expected}, found {found}")]
    VersionMismatch { field: String, expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (records: {records})")]
    NonFiniteLoss { epoch: usize, batch: usize, records: String },
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error(transparent)]
    Dataset(#[from] regerr_core::dataset::DatasetError),
}

impl NetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> NetError {
        NetError::Io { path: path.into(), source }
    }

    /// Corrupt or truncated file content, reported as an I/O error.
    pub(crate) fn corrupt(path: impl Into<PathBuf>, msg: impl Into<String>) -> NetError {
        NetError::io(path, io::Error::new(io::ErrorKind::InvalidData, msg.into()))
    }
}
