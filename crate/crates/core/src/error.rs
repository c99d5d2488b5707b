use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadtError {
    #[error("episode exhausted")]
    EpisodeExhausted,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("insufficient distinct tasks: requested {requested}, only {available} available")]
    InsufficientTasks { requested: usize, available: usize },
    #[error("dataset error in episode {episode_id}: {msg}")]
    Episode { episode_id: u64, msg: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Nn(#[from] radt_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RadtError>;
