//! Crate-wide error type.
//!
//! Every failure is assigned one of four classes so that callers (notably
//! the CLI) can map errors onto stable exit codes: bad input, a violated
//! statistical hypothesis, a numerical breakdown, or a broken internal
//! invariant.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or inconsistent configuration / input data.
    Config,
    /// A distributional hypothesis required by an estimator does not hold.
    Hypothesis,
    /// A numerical routine failed to converge or left its valid domain.
    Numeric,
    /// An internal invariant was violated (bug or unusable regime).
    Invariant,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("hypothesis not satisfied: {0}")]
    Hypothesis(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("quadrature did not reach relative tolerance {wanted:e} (achieved {achieved:e})")]
    Quadrature { wanted: f64, achieved: f64 },

    #[error("root solve did not converge: {0}")]
    RootSolve(String),

    #[error("sampling unsupported for this distribution family: {0}")]
    SamplingUnsupported(String),

    #[error("density unavailable for this distribution family: {0}")]
    DensityUnsupported(String),

    #[error("energy cap exceeded at rescaled time {time}: H = {energy}")]
    CapExceeded { time: f64, energy: f64 },

    #[error("no branch decision within the collision budget ({0} collisions)")]
    NoDecision(u64),

    #[error("rejection sampler efficiency {0:e} below minimum; envelope unusable")]
    Envelope(f64),

    #[error("tie encountered in {0}; analysis requires generic (tie-free) data")]
    Tie(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Io(_) => ErrorClass::Config,
            Error::Hypothesis(_) | Error::SamplingUnsupported(_) | Error::DensityUnsupported(_) => {
                ErrorClass::Hypothesis
            }
            Error::Numeric(_)
            | Error::Quadrature { .. }
            | Error::RootSolve(_)
            | Error::Envelope(_) => ErrorClass::Numeric,
            Error::Invariant(_)
            | Error::CapExceeded { .. }
            | Error::NoDecision(_)
            | Error::Tie(_) => ErrorClass::Invariant,
        }
    }
}
