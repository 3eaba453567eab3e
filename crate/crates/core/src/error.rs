use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BasnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BasnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged in {stage} at epoch {epoch}: non-finite loss (parameters restored to epoch {restored_epoch})")]
    TrainingDiverged {
        stage: String,
        epoch: usize,
        restored_epoch: usize,
    },

    #[error("capacity exceeded: payload needs {required} bits but only {available} slots are available ({available_bpp:.4} bpp)")]
    CapacityExceeded {
        required: usize,
        available: usize,
        available_bpp: f64,
    },

    #[error("not a stego image or wrong model/knobs: {0}")]
    NotAStego(String),

    #[error("corrupt payload: header announces {expected} bits but only {} could be read", recovered.len())]
    CorruptPayload { expected: u64, recovered: Vec<bool> },

    #[error("feature distortion rate undefined: cover features have zero norm")]
    UndefinedRate,

    #[error("checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> BasnError {
    BasnError::InvalidArgument(msg.into())
}
