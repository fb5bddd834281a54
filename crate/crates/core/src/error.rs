use thiserror::Error;

/// Errors raised by the solvers and their inputs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("numerical failure at time slice {slice}: {reason}")]
    NumericalFailure { slice: usize, reason: String },

    #[error("infeasible marginal constraint at node {node}: the model assigns zero mass where the target is positive")]
    Infeasible { node: usize },

    #[error("normalization constant is stale; run forward_backward first")]
    StaleNormalization,

    #[error("empty support at time slice {slice}")]
    EmptySupport { slice: usize },

    #[error("empty sample set")]
    EmptySamples,

    #[error("boundary matching did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NonConvergence { iterations: usize, mismatch: f64 },

    #[error("covariance lost positive definiteness at mesh point {index} (t = {t})")]
    NotPositiveDefinite { index: usize, t: f64 },

    #[error("singular boundary map: {0}")]
    SingularBoundaryMap(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
