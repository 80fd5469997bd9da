//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClozeError {
    #[error("invalid graph config: {0}")]
    GraphConfig(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("no task satisfies the constraints: {0}")]
    NoValidTask(String),

    #[error("unknown transform kind `{0}`")]
    UnknownKind(String),

    #[error("kind `{0}` is not forward-computable")]
    NotForwardComputable(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl From<png::EncodingError> for ClozeError {
    fn from(e: png::EncodingError) -> Self {
        ClozeError::Png(e.to_string())
    }
}

impl From<png::DecodingError> for ClozeError {
    fn from(e: png::DecodingError) -> Self {
        ClozeError::Png(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ClozeError>;
