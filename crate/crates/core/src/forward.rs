//! The classical nonlinear filter (forward algorithm), serving as ground
//! truth for the dual-filter outputs.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hmm::{HmmModel, Measure, TokenSequence};

/// Normalizers at or below this are treated as an impossible observation
/// rather than risking a division underflow.
pub const NORMALIZER_FLOOR: f64 = 1e-300;

/// The posterior path `π_0 = μ, π_1, ..., π_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTrajectory {
    pub measures: Vec<Measure>,
}

impl PosteriorTrajectory {
    /// Horizon `T` (number of observations consumed).
    pub fn horizon(&self) -> usize {
        self.measures.len() - 1
    }
}

/// Next-token probability rows `p_1 .. p_T` (each over the vocabulary).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    pub rows: Vec<DVector<f64>>,
}

/// One Bayes update: condition `π` on observing token `z` and propagate one
/// step through the transition matrix.
///
/// Componentwise, `π'(x') = Σ_x π(x) C(x,z) A(x,x') / Σ_x π(x) C(x,z)`.
/// A vanishing normalizer is an explicit [`Error::ImpossibleObservation`]
/// instead of the 0/0 = 0 convention: downstream consumers require valid
/// probability measures.
pub fn forward_step(pi: &Measure, model: &HmmModel, z: usize) -> Result<Measure> {
    let likelihood = model.emission_column(z)?;
    forward_step_with_likelihood(pi, &likelihood, model).map_err(|e| match e {
        Error::ImpossibleObservation {
            time, normalizer, ..
        } => Error::ImpossibleObservation {
            time,
            token: z,
            normalizer,
        },
        other => other,
    })
}

/// The same update with an explicit likelihood column `l(x) = P(z | x)`.
///
/// The output is invariant to scaling `l` by any positive constant.
pub fn forward_step_with_likelihood(
    pi: &Measure,
    likelihood: &DVector<f64>,
    model: &HmmModel,
) -> Result<Measure> {
    let weighted = pi.weights().component_mul(likelihood);
    let normalizer: f64 = weighted.sum();
    if normalizer <= NORMALIZER_FLOOR {
        return Err(Error::ImpossibleObservation {
            time: 0,
            token: 0,
            normalizer,
        });
    }
    // π'(x') = (Aᵀ weighted)(x') / normalizer
    let next = model.transition().tr_mul(&weighted) / normalizer;
    Measure::new(next)
}

/// Runs the filter over a full token sequence: `π_0 = μ`, then one
/// [`forward_step`] per observation. Errors carry the offending 1-based time.
pub fn forward_filter(model: &HmmModel, tokens: &TokenSequence) -> Result<PosteriorTrajectory> {
    let mut measures = Vec::with_capacity(tokens.len() + 1);
    measures.push(model.prior().clone());
    for (idx, &z) in tokens.tokens().iter().enumerate() {
        let next = forward_step(measures.last().unwrap(), model, z).map_err(|e| match e {
            Error::ImpossibleObservation {
                token, normalizer, ..
            } => Error::ImpossibleObservation {
                time: idx + 1,
                token,
                normalizer,
            },
            other => other,
        })?;
        measures.push(next);
    }
    Ok(PosteriorTrajectory { measures })
}

/// Next-token law `p(z) = Σ_x π(x) C(x, z)`.
pub fn predict(pi: &Measure, model: &HmmModel) -> DVector<f64> {
    model.emission().tr_mul(pi.weights())
}

/// [`predict`] applied along a trajectory, giving `p_1 .. p_T`
/// (the prediction made after consuming `z_1 .. z_t`).
pub fn predict_trajectory(
    trajectory: &PosteriorTrajectory,
    model: &HmmModel,
) -> PredictionSequence {
    PredictionSequence {
        rows: trajectory.measures[1..]
            .iter()
            .map(|pi| predict(pi, model))
            .collect(),
    }
}
