//! Dual-filter inference for hidden Markov models.
//!
//! The crate computes next-token conditional probabilities for a discrete HMM
//! along three routes that must agree with each other:
//!
//! 1. the classical forward algorithm ([`forward`]),
//! 2. a brute-force enumeration oracle ([`oracle`]), and
//! 3. the dual filter ([`dual_filter`]), a fixed-point layer map on sequences
//!    of probability measures driven by minimum-variance optimal control.
//!
//! Supporting machinery: HMM construction, sampling and spectra ([`hmm`]),
//! the token encoding and moment operators ([`geometry`]), the optimal
//! control formulas ([`control`]), and an exact backward-equation solver used
//! to verify the duality identities on small instances ([`bsde`]).

pub mod bsde;
pub mod control;
pub mod dual_filter;
mod error;
pub mod forward;
pub mod geometry;
pub mod hmm;
pub mod oracle;

pub use error::{Error, Result};
pub use forward::{PosteriorTrajectory, PredictionSequence};
pub use hmm::{HmmModel, Measure, SamplePath, SignedMeasure, TokenSequence};
