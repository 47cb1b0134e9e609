use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unmatched files between low and high directories: {}", .0.join(", "))]
    Orphans(Vec<String>),

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gamut fingerprint mismatch: checkpoint has {expected}, runtime has {found}")]
    GamutMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this class of failure: 2 for data problems, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Config(_) | Error::Validation(_) => 1,
            _ => 2,
        }
    }
}
