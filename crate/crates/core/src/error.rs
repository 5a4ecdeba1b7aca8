use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("manifest {path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Failures while reading a checkpoint. Each kind maps to its own variant so
/// callers can tell a damaged file from an incompatible one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor `{name}` has shape {found:?} in checkpoint, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),

    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("unsupported checkpoint schema version {0}")]
    Version(u32),

    #[error("refusing to save non-finite tensor `{0}`")]
    NonFinite(String),
}

impl CheckpointError {
    /// Stable numeric code, used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            CheckpointError::CorruptHeader(_) => 10,
            CheckpointError::Truncated { .. } => 11,
            CheckpointError::ShapeMismatch { .. } => 12,
            CheckpointError::MissingTensor(_) => 13,
            CheckpointError::UnexpectedTensor(_) => 14,
            CheckpointError::Version(_) => 15,
            CheckpointError::NonFinite(_) => 16,
        }
    }
}
