use thiserror::Error;

/// Errors surfaced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation before any computation ran.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// The requested parameter regime admits only the trivial solution.
    #[error("parameter regime: {0}")]
    Regime(String),

    /// An input left the open domain (-1, 1)^n required by the entropy terms.
    #[error("domain violation: {0}")]
    Domain(String),

    /// A matrix expected to be full rank or positive definite was not.
    #[error("rank/definiteness failure: {0}")]
    Degenerate(String),

    /// A numerical routine produced non-finite values or failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
