use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operation on an empty set")]
    EmptySet,

    #[error("Minkowski summand is neither an axis-aligned box nor a segment")]
    UnsupportedSummand,

    #[error("matrix is numerically singular (condition number {cond:.3e})")]
    SingularMatrix { cond: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("viability kernel is empty (first empty step {step})")]
    EmptyKernel { step: usize },

    #[error("all models falsified; no model left to evaluate")]
    NoModelsLeft,

    #[error("no stored kernel for model `{0}`")]
    MissingKernel(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
