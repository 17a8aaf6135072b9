use std::io;

use thiserror::Error;

/// Errors produced by the attack pipeline and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// The MDP start state is already terminal; the caller must resample the target video.
    #[error("invalid start state: {0}")]
    InvalidStart(String),

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("search direction unusable: {0}")]
    DirectionUnusable(String),

    #[error("no candidate direction satisfies the attack condition")]
    InitializationFailure,

    #[error("query budget of {0} exhausted")]
    BudgetExhausted(u64),

    #[error("rejected batch: {0}")]
    RejectedBatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
