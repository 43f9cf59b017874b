//! Error taxonomy for the whole crate.
//!
//! Variants map onto the harness exit codes: configuration problems exit 2,
//! numerical failures exit 3, everything else that fails a check exits 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something structurally invalid: dimension mismatch,
    /// time outside `[0, t_max]`, non-positive step count, and so on.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that must be symmetric positive definite was not.
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A finite quantity came out NaN or infinite. The context names the
    /// operation and, for flow integration, the failing step index.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A Jacobian action collapsed to zero norm, so its log cannot be taken.
    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),

    /// Every particle weight underflowed or went non-finite at once.
    #[error("degenerate ensemble at level {level}: {detail}")]
    DegenerateEnsemble { level: usize, detail: String },

    /// Run-configuration file is syntactically or semantically bad.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
