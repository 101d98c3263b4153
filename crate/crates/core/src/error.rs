use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("hdf5 error in {path}: {source}")]
    Hdf5 {
        path: PathBuf,
        #[source]
        source: hdf5::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("dataset `{dataset}` not found in {path}")]
    MissingDataset { path: PathBuf, dataset: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("npy error: {0}")]
    Npy(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("negative rain rate {0}")]
    NegativeRate(f64),

    #[error("value {value} outside [0, 1] at index {index}")]
    OutOfUnitRange { index: usize, value: f64 },

    #[error("box at ({row}, {col}) of size {size} exceeds a {height}x{width} grid")]
    BoxOutOfBounds {
        row: usize,
        col: usize,
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("not enough frames: need {needed}, have {available}")]
    InsufficientFrames { needed: usize, available: usize },

    #[error("index {index} out of range (valid: {valid})")]
    IndexOutOfRange { index: usize, valid: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
