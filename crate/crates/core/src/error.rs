use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shrinkage rho = {rho} outside the admissible range [{lower}, 1]")]
    RhoOutOfRange { rho: f64, lower: f64 },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("sample {index} is the zero vector")]
    ZeroSample { index: usize },

    #[error("dataset carries no ground-truth (z_i, tau_i)")]
    MissingTruth,

    #[error("bisection bracket could not be established for {0}")]
    BracketFailure(&'static str),

    #[error("degenerate denominator {value:.3e} in {context}")]
    DegenerateDenominator { context: &'static str, value: f64 },

    #[error("matrix is not Hermitian positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("every grid point failed")]
    AllPointsFailed,

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
