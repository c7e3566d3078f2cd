use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("weight matrix is not symmetric at ({i}, {j}): {a} vs {b}")]
    AsymmetricWeights { i: usize, j: usize, a: f64, b: f64 },

    #[error("negative weight {weight} at ({i}, {j})")]
    NegativeWeight { i: usize, j: usize, weight: f64 },

    #[error("vertex index {index} out of range for graph of {n} vertices")]
    VertexOutOfRange { index: usize, n: usize },

    #[error("sample set must be strictly increasing and within range: {reason}")]
    InvalidSampleSet { reason: String },

    #[error("eigendecomposition failed to converge")]
    EigenFailed,

    #[error("matrix is not symmetric positive definite ({context})")]
    NotSpd { context: &'static str },

    #[error("singular innovation matrix in measurement update")]
    SingularInnovation,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
