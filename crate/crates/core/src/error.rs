//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors surfaced by model validation, filtering, and the dual solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("negative entry {value:.3e} at {location}")]
    NegativeEntry { location: String, value: f64 },

    #[error("row sum {sum:.17} deviates from 1 beyond tolerance at {location}")]
    RowSumError { location: String, sum: f64 },

    #[error("alpha {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f64 },

    #[error("eigenvalue iteration did not converge")]
    EigenFailure,

    #[error("observation {token} has conditional probability {normalizer:.3e} at step {time}")]
    ImpossibleObservation {
        time: usize,
        token: usize,
        normalizer: f64,
    },

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("model is not binary-valued (vocabulary size {vocab_size}, need 2)")]
    NotBinary { vocab_size: usize },

    #[error("enumeration of {points} mass points exceeds the limit of {limit}")]
    TooLarge { points: u128, limit: u64 },

    #[error("token prefix of length {length} has zero probability under the model")]
    ZeroProbabilityPrefix { length: usize },

    #[error("linear solve failed in measure recovery (reciprocal condition estimate {rcond:.3e})")]
    SolveFailure { rcond: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
