use thiserror::Error;

pub type Result<T> = std::result::Result<T, GprgError>;

#[derive(Debug, Error)]
pub enum GprgError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("preconditioner not coercive at this state ({detail}); try a larger sigma0 or a state closer to the minimizer")]
    NotCoercive { detail: String },

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:.3e}, target {target:.3e})")]
    SolveNotConverged {
        iterations: usize,
        residual: f64,
        target: f64,
    },

    #[error("line search failed: no sufficient decrease after {halvings} reductions (last tau {tau:.3e})")]
    LineSearchFailed { halvings: usize, tau: f64 },

    #[error("energy increased on an accepted step ({before:.17e} -> {after:.17e})")]
    Divergence { before: f64, after: f64 },

    #[error("eigensolver did not converge after {iterations} iterations (max relative residual {residual:.3e})")]
    EigenNotConverged { iterations: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
