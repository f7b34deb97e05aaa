use thiserror::Error;

/// Errors raised by the algorithmic core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("dependency graph contains a cycle")]
    CycleDetected,

    #[error("{field} = {value} is outside [0, 1]")]
    OutOfRange { field: &'static str, value: f64 },

    #[error("embedding {index} has zero norm")]
    DegenerateEmbedding { index: usize },

    #[error("no node reaches the failure set")]
    EmptyInfluence,

    #[error("unknown step {0}")]
    UnknownStep(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
