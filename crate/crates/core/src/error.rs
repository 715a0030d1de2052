use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("non-finite Hessian-vector product at parameter index {index}")]
    NonFiniteHvp { index: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter vector has length {actual}, network expects {expected}")]
    ParamLength { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported model family `{0}`")]
    UnsupportedFamily(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("IDX: bad magic bytes {0:02x?}")]
    IdxBadMagic([u8; 2]),
    #[error("IDX: unsupported type code 0x{0:02x}")]
    IdxUnsupportedType(u8),
    #[error("IDX: truncated payload, expected {expected} bytes, found {found}")]
    IdxTruncated { expected: usize, found: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("schema mismatch: column `{column}`: {reason}")]
    Schema { column: String, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
