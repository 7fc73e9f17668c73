//! Brute-force Bayes oracle: exact posteriors, predictions and MMSE obtained
//! by direct summation over latent paths. Nothing here reuses the filter
//! recursion — independence from the code under test is the point.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::forward::PosteriorTrajectory;
use crate::hmm::{HmmModel, Measure, TokenSequence};

/// Hard cap on the number of enumerated mass points.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

fn check_state_paths(d: usize, horizon: usize) -> Result<()> {
    let points = (d as u128).checked_pow(horizon as u32 + 1).unwrap_or(u128::MAX);
    if points > ENUMERATION_LIMIT as u128 {
        return Err(Error::TooLarge {
            points,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

fn check_joint(d: usize, vocab: usize, horizon: usize) -> Result<()> {
    let states = (d as u128).checked_pow(horizon as u32 + 1).unwrap_or(u128::MAX);
    let tokens = (vocab as u128).checked_pow(horizon as u32).unwrap_or(u128::MAX);
    let points = states.checked_mul(tokens).unwrap_or(u128::MAX);
    if points > ENUMERATION_LIMIT as u128 {
        return Err(Error::TooLarge {
            points,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Visits every state path `x_0 .. x_T` for a fixed token path, calling
/// `visit(states, mass)` with the joint mass
/// `μ(x_0) Π_t A(x_t, x_{t+1}) Π_t C(x_t, z_{t+1})`.
fn for_each_state_path<F: FnMut(&[usize], f64)>(
    model: &HmmModel,
    tokens: &[usize],
    visit: &mut F,
) {
    let horizon = tokens.len();
    let mut states = vec![0usize; horizon + 1];

    fn recurse<F: FnMut(&[usize], f64)>(
        model: &HmmModel,
        tokens: &[usize],
        states: &mut Vec<usize>,
        depth: usize,
        mass: f64,
        visit: &mut F,
    ) {
        let d = model.num_states();
        if depth == 0 {
            for x0 in 0..d {
                states[0] = x0;
                recurse(model, tokens, states, 1, model.prior().weights()[x0], visit);
            }
            return;
        }
        if depth == states.len() {
            visit(states, mass);
            return;
        }
        let prev = states[depth - 1];
        let emit = model.emission()[(prev, tokens[depth - 1])];
        for x in 0..d {
            states[depth] = x;
            let step = emit * model.transition()[(prev, x)];
            recurse(model, tokens, states, depth + 1, mass * step, visit);
        }
    }

    recurse(model, tokens, &mut states, 0, 1.0, visit);
}

/// Exact posterior trajectory for a fixed token path, computed as
/// `π_t(x) = P(X_t = x, Z_{1..t} = z_{1..t}) / P(Z_{1..t} = z_{1..t})`
/// by summing path masses.
pub fn exact_posterior(model: &HmmModel, tokens: &TokenSequence) -> Result<PosteriorTrajectory> {
    let d = model.num_states();
    let horizon = tokens.len();
    check_state_paths(d, horizon)?;

    // joint[t][x] accumulates P(X_t = x, Z_{1..t} = prefix of length t).
    let mut joint = vec![vec![0.0f64; d]; horizon + 1];
    let mut states = vec![0usize; horizon + 1];

    // Accumulate prefix-marginal masses directly: each partial product of
    // the path mass is itself the joint mass of the prefix.
    fn recurse(
        model: &HmmModel,
        tokens: &[usize],
        states: &mut Vec<usize>,
        joint: &mut Vec<Vec<f64>>,
        depth: usize,
        mass: f64,
    ) {
        let d = model.num_states();
        if depth == 0 {
            for x0 in 0..d {
                states[0] = x0;
                let m = model.prior().weights()[x0];
                joint[0][x0] += m;
                recurse(model, tokens, states, joint, 1, m);
            }
            return;
        }
        if depth > tokens.len() {
            return;
        }
        let prev = states[depth - 1];
        let emit = model.emission()[(prev, tokens[depth - 1])];
        for x in 0..d {
            states[depth] = x;
            let m = mass * emit * model.transition()[(prev, x)];
            joint[depth][x] += m;
            recurse(model, tokens, states, joint, depth + 1, m);
        }
    }
    recurse(model, tokens.tokens(), &mut states, &mut joint, 0, 1.0);

    let mut measures = Vec::with_capacity(horizon + 1);
    for (t, row) in joint.into_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroProbabilityPrefix { length: t });
        }
        measures.push(Measure::new(DVector::from_vec(row))?);
    }
    Ok(PosteriorTrajectory { measures })
}

/// Exact next-token law after each prefix:
/// `p_t(z) = P(Z_{t+1} = z | Z_{1..t})` from the enumerated posterior.
pub fn exact_predictions(model: &HmmModel, tokens: &TokenSequence) -> Result<Vec<DVector<f64>>> {
    let traj = exact_posterior(model, tokens)?;
    Ok(traj.measures[1..]
        .iter()
        .map(|pi| model.emission().tr_mul(pi.weights()))
        .collect())
}

/// A terminal statistic `F ∈ Z_T`: one function on states per length-T token
/// path, indexed by the base-`(m+1)` code of the path.
pub trait TerminalStatistic {
    fn value(&self, token_path: &[usize], state: usize) -> f64;
}

impl<G: Fn(&[usize], usize) -> f64> TerminalStatistic for G {
    fn value(&self, token_path: &[usize], state: usize) -> f64 {
        self(token_path, state)
    }
}

/// Exact minimum mean-squared error `E |F(X_T) - π_T(F)|²`, summing over the
/// full joint law with `π_T` taken from [`exact_posterior`].
pub fn exact_mmse<F: TerminalStatistic>(model: &HmmModel, horizon: usize, f: &F) -> Result<f64> {
    enumerate_token_paths(model, horizon, |tokens, _| {
        let traj = exact_posterior(
            model,
            &TokenSequence::new(tokens.to_vec(), model.vocab_size())?,
        )?;
        let pi_t = traj.measures.last().unwrap();
        let estimate: f64 = (0..model.num_states())
            .map(|x| pi_t.weights()[x] * f.value(tokens, x))
            .sum();

        let mut contribution = 0.0;
        for_each_state_path(model, tokens, &mut |states, mass| {
            let err = f.value(tokens, states[states.len() - 1]) - estimate;
            contribution += mass * err * err;
        });
        Ok(contribution)
    })
}

/// Expected squared error of an arbitrary path-measurable estimator
/// `S(z_{1..T})`, for optimality comparisons against [`exact_mmse`].
pub fn exact_estimator_mse<F, S>(model: &HmmModel, horizon: usize, f: &F, s: &S) -> Result<f64>
where
    F: TerminalStatistic,
    S: Fn(&[usize]) -> f64,
{
    enumerate_token_paths(model, horizon, |tokens, _| {
        let estimate = s(tokens);
        let mut contribution = 0.0;
        for_each_state_path(model, tokens, &mut |states, mass| {
            let err = f.value(tokens, states[states.len() - 1]) - estimate;
            contribution += mass * err * err;
        });
        Ok(contribution)
    })
}

/// Sums `body(token_path, path_probability)` over all token paths of the
/// given length. Paths of zero probability are still visited (their
/// probability is 0), except that `body` is skipped when the prefix mass
/// vanishes to avoid conditioning on null events.
fn enumerate_token_paths<B>(model: &HmmModel, horizon: usize, mut body: B) -> Result<f64>
where
    B: FnMut(&[usize], f64) -> Result<f64>,
{
    check_joint(model.num_states(), model.vocab_size(), horizon)?;
    let vocab = model.vocab_size();
    let mut tokens = vec![0usize; horizon];
    let mut total = 0.0;
    loop {
        let mut prob = 0.0;
        for_each_state_path(model, &tokens, &mut |_, mass| prob += mass);
        if prob > 0.0 {
            total += body(&tokens, prob)?;
        }
        // Odometer increment over the token alphabet.
        let mut pos = horizon;
        loop {
            if pos == 0 {
                return Ok(total);
            }
            pos -= 1;
            tokens[pos] += 1;
            if tokens[pos] < vocab {
                break;
            }
            tokens[pos] = 0;
        }
    }
}

/// Probability of a full token path under the model.
pub fn token_path_probability(model: &HmmModel, tokens: &TokenSequence) -> Result<f64> {
    check_state_paths(model.num_states(), tokens.len())?;
    let mut prob = 0.0;
    for_each_state_path(model, tokens.tokens(), &mut |_, mass| prob += mass);
    Ok(prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::forward;
    use crate::hmm::random_stochastic_matrix;

    fn random_model(d: usize, vocab: usize, seed: u64) -> HmmModel {
        let prior_raw = random_stochastic_matrix(1, d, 1.0, seed ^ 0xA5A5);
        HmmModel::new(
            prior_raw.row(0).transpose(),
            random_stochastic_matrix(d, d, 1.0, seed),
            random_stochastic_matrix(d, vocab, 1.0, seed.wrapping_add(1)),
        )
        .unwrap()
    }

    #[test]
    fn single_state_model_is_trivial() {
        let model = HmmModel::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[0.3, 0.7]),
        )
        .unwrap();
        let tokens = TokenSequence::new(vec![1, 0, 1], 2).unwrap();
        let traj = exact_posterior(&model, &tokens).unwrap();
        for pi in &traj.measures {
            assert_eq!(pi.weights()[0], 1.0);
        }
        // Token path mass is the product of emission probabilities.
        let p = token_path_probability(&model, &tokens).unwrap();
        assert!((p - 0.7 * 0.3 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn posterior_at_time_zero_is_prior() {
        let model = random_model(3, 2, 21);
        let tokens = TokenSequence::new(vec![1, 0], 2).unwrap();
        let traj = exact_posterior(&model, &tokens).unwrap();
        assert!((traj.measures[0].weights() - model.prior().weights()).amax() < 1e-14);
    }

    #[test]
    fn forward_filter_matches_the_oracle() {
        for seed in 0..10 {
            let model = random_model(3, 2, seed);
            let path = model.sample_path(3, seed.wrapping_add(100));
            let oracle = exact_posterior(&model, &path.tokens).unwrap();
            let filter = forward::forward_filter(&model, &path.tokens).unwrap();
            for t in 0..=3 {
                let gap = (oracle.measures[t].weights() - filter.measures[t].weights()).amax();
                assert!(gap < 1e-12, "seed {seed} t {t}: gap {gap}");
            }
        }
    }

    #[test]
    fn predictions_match_forward_predictions() {
        let model = random_model(3, 2, 33);
        let path = model.sample_path(3, 77);
        let oracle = exact_predictions(&model, &path.tokens).unwrap();
        let traj = forward::forward_filter(&model, &path.tokens).unwrap();
        let filter = forward::predict_trajectory(&traj, &model);
        for (a, b) in oracle.iter().zip(&filter.rows) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn total_joint_mass_is_one() {
        let model = random_model(3, 3, 55);
        let total = enumerate_token_paths(&model, 3, |_, p| Ok(p)).unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tower_property_holds() {
        // E(π_T(F)) over token paths equals E(F(X_T)) under the joint law.
        let model = random_model(3, 2, 8);
        let horizon = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let f_values: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |_: &[usize], x: usize| f_values[x];

        let lhs = enumerate_token_paths(&model, horizon, |tokens, prob| {
            let traj = exact_posterior(
                &model,
                &TokenSequence::new(tokens.to_vec(), model.vocab_size())?,
            )?;
            let pi_t = traj.measures.last().unwrap();
            let est: f64 = (0..3).map(|x| pi_t.weights()[x] * f_values[x]).sum();
            Ok(prob * est)
        })
        .unwrap();

        let mut rhs = 0.0;
        enumerate_token_paths(&model, horizon, |tokens, _| {
            let mut acc = 0.0;
            for_each_state_path(&model, tokens, &mut |states, mass| {
                acc += mass * f(tokens, states[states.len() - 1]);
            });
            rhs += acc;
            Ok(0.0)
        })
        .unwrap();

        assert!((lhs - rhs).abs() < 1e-12, "tower gap {}", (lhs - rhs).abs());
    }

    #[test]
    fn mmse_beats_arbitrary_estimators() {
        let model = random_model(3, 2, 13);
        let horizon = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f_values: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = move |_: &[usize], x: usize| f_values[x];
        let mmse = exact_mmse(&model, horizon, &f).unwrap();

        for trial in 0..20u64 {
            let mut path_rng = ChaCha8Rng::seed_from_u64(trial);
            let offsets: Vec<f64> = (0..8).map(|_| path_rng.gen_range(-1.0..1.0)).collect();
            let estimator = |tokens: &[usize]| {
                let code: usize = tokens.iter().fold(0, |acc, &z| acc * 2 + z);
                offsets[code % offsets.len()]
            };
            let mse = exact_estimator_mse(&model, horizon, &f, &estimator).unwrap();
            assert!(mse + 1e-12 >= mmse, "estimator {trial} beat the MMSE");
        }
    }

    #[test]
    fn constant_statistic_has_zero_mmse() {
        let model = random_model(2, 2, 99);
        let f = |_: &[usize], _: usize| 2.5;
        let mmse = exact_mmse(&model, 2, &f).unwrap();
        assert!(mmse.abs() < 1e-14);
    }

    #[test]
    fn uninformative_emissions_leave_the_marginal_variance() {
        // Symmetric 2-state chain with uniform emissions: the posterior never
        // moves off the prior, so the MMSE is the variance of F(X_T) under
        // the time-T marginal.
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.3, 0.7]);
        let c = DMatrix::from_element(2, 2, 0.5);
        let model = HmmModel::new(DVector::from_vec(vec![0.5, 0.5]), a.clone(), c).unwrap();
        let horizon = 3;
        let f_values = [1.0, -1.0];
        let f = |_: &[usize], x: usize| f_values[x];

        // Time-T marginal: uniform prior is stationary for the symmetric chain.
        let marginal = [0.5, 0.5];
        let mean: f64 = marginal[0] * f_values[0] + marginal[1] * f_values[1];
        let var: f64 = marginal[0] * (f_values[0] - mean).powi(2)
            + marginal[1] * (f_values[1] - mean).powi(2);

        let mmse = exact_mmse(&model, horizon, &f).unwrap();
        assert!((mmse - var).abs() < 1e-12, "mmse {mmse} vs var {var}");
    }

    #[test]
    fn enumeration_guard_trips() {
        let model = random_model(4, 3, 1);
        let err = exact_mmse(&model, 20, &|_: &[usize], _: usize| 0.0).unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
    }

    #[test]
    fn zero_probability_prefix_is_reported() {
        // State 0 never emits token 1 and the chain never leaves state 0.
        let model = HmmModel::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let tokens = TokenSequence::new(vec![1], 2).unwrap();
        let err = exact_posterior(&model, &tokens).unwrap_err();
        assert!(matches!(err, Error::ZeroProbabilityPrefix { length: 1 }));
    }
}
