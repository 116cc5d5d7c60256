use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid density operator: {0}")]
    InvalidDensity(String),

    #[error("numerical consistency violated: {0}")]
    NumericalConsistency(String),

    #[error("invalid purification: {0}")]
    InvalidPurification(String),

    #[error("horizontal lift diverged at t = {time}: projection error {error:e}")]
    LiftDiverged { time: f64, error: f64 },

    #[error("invalid gauge element: {0}")]
    InvalidGauge(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("matrix logarithm branch is ambiguous (rotation angle {angle} is at pi)")]
    BranchAmbiguity { angle: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
