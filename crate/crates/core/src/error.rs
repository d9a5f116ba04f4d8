//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrirlError>;

#[derive(Debug, Error)]
pub enum TrirlError {
    /// A probability table failed validation (negative mass, rows not
    /// summing to one, occupancy mass not summing to one, ...).
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// A scalar or structural argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two tables that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("solver did not converge within {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: u64, residual: f64 },

    /// The multiplier search could not bracket a feasible point below the cap.
    #[error("multiplier bracketing failed: {0}")]
    BracketFailure(String),

    /// A covariance argument is not symmetric positive definite.
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    /// The correction buffer holds no entries.
    #[error("correction buffer is empty")]
    EmptyBuffer,

    /// The dual objective moved away from the optimum beyond slack on a run
    /// that guarantees monotone improvement.
    #[error("dual objective degraded by {delta:.3e} at iteration {iter}")]
    MonotonicityViolation { iter: usize, delta: f64 },

    /// A checked invariant came out false; `observed` exceeded `bound`.
    #[error("invariant `{name}` failed: observed {observed:.6e}, bound {bound:.6e}")]
    InvariantFailure {
        name: String,
        observed: f64,
        bound: f64,
    },

    /// Bad configuration file or command line.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrirlError {
    /// Process exit code for the CLI: 1 config, 2 solver, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrirlError::Config(_)
            | TrirlError::Io(_)
            | TrirlError::Json(_)
            | TrirlError::InvalidArgument(_)
            | TrirlError::ShapeMismatch(_)
            | TrirlError::InvalidDistribution(_) => 1,
            TrirlError::NonConvergence { .. }
            | TrirlError::BracketFailure(_)
            | TrirlError::NotSpd(_)
            | TrirlError::EmptyBuffer => 2,
            TrirlError::MonotonicityViolation { .. } | TrirlError::InvariantFailure { .. } => 3,
        }
    }
}
