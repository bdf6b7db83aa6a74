//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: non-finite entries, bad shapes, invalid parameters.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Conformability failure between matrices or tables.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Rank or invertibility failure that breaks identification.
    #[error("identification failure: {0}")]
    Identification(String),

    /// The moment system lacks the structure the operation requires
    /// (e.g. a nonzero cross-Jacobian where a two-step split needs zero).
    #[error("structure violation: {0}")]
    Structure(String),

    /// A required nuisance influence table or input is missing.
    #[error("missing dependency: {0}")]
    Dependency(String),

    /// Conditioning on a zero-mass event or querying outside the support.
    #[error("domain error: {0}")]
    Domain(String),

    /// Root finder did not converge; carries the iteration trace.
    #[error("solver failed: {msg}; trace: {trace:?}")]
    Solver { msg: String, trace: Vec<(usize, f64)> },

    /// A constructed object failed its own certification.
    #[error("construction failed: {0}")]
    Construction(String),

    /// Function evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// The finite-difference oracle could not complete a sweep.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// I/O or parsing problem on external data.
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
