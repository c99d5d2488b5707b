use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("parameter store is frozen; refusing gradient update")]
    Frozen,
    #[error("gradient check requires a deterministic graph (disable dropout)")]
    NonDeterministic,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
