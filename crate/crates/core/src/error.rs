//! Error type shared by all modules of the crate.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A primitive was evaluated outside its domain (log of a non-positive
    /// value, division by zero, square root of a negative value).
    #[error("domain violation in `{op}`: operand {value}")]
    Domain { op: &'static str, value: f64 },

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// Every importance weight of a sample set is zero, so no Bayesian
    /// estimate can be formed.
    #[error("all importance weights are zero: observation is degenerate for this sample set")]
    DegenerateObservation,

    #[error("unsupported estimator configuration: {0}")]
    UnsupportedEstimator(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;
