use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite operand")]
    NonFinite,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("step {step} is past the end of the schedule ({total_steps} steps)")]
    StepOutOfRange { step: usize, total_steps: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("no active tokens in step")]
    NoActiveTokens,

    #[error(
        "insufficient data: step {step} needs samples up to {needed}, dataset has {available}"
    )]
    InsufficientData {
        step: usize,
        needed: usize,
        available: usize,
    },

    #[error("insufficient trace: {0}")]
    InsufficientTrace(String),

    #[error("out-of-order trace record: step {got} after step {last}")]
    OutOfOrder { last: usize, got: usize },

    #[error("empty method")]
    EmptyMethod,

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
