//! Exact, enumeration-based backward stochastic difference equation solver,
//! the quadratic control cost, and the duality checks that tie the cost to
//! mean-squared estimation error.
//!
//! Everything here works on prefix-indexed tables: a process adapted to the
//! observation filtration is a function of the token prefix, so time `t`
//! holds one value per element of `O^t`. Prefixes are coded in base
//! `m + 1` with the earliest token most significant, so extending a prefix
//! by token `z` maps code `w` to `w * (m+1) + z`. Exact representation keeps
//! the theorem checks at machine precision; the price is the enumeration
//! guard below.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::optimal_control_general;
use crate::error::{Error, Result};
use crate::forward::{forward_step, predict};
use crate::geometry::{build_moments, decompose, dot_encoded, gamma_apply, variance_bracket};
use crate::hmm::{HmmModel, Measure};

/// Hard cap on `d^(T+1) · (m+1)^T`, the number of enumerated mass points.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

fn check_guard(model: &HmmModel, horizon: usize) -> Result<()> {
    let d = model.num_states() as u128;
    let vocab = model.vocab_size() as u128;
    let points = d
        .checked_pow(horizon as u32 + 1)
        .and_then(|s| s.checked_mul(vocab.checked_pow(horizon as u32)?))
        .unwrap_or(u128::MAX);
    if points > ENUMERATION_LIMIT as u128 {
        return Err(Error::TooLarge {
            points,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

fn prefix_count(vocab: usize, t: usize) -> usize {
    vocab.pow(t as u32)
}

// ---------------------------------------------------------------------------
// Adapted processes and terminal conditions
// ---------------------------------------------------------------------------

/// A `Z`-adapted control process: at each `t = 0 .. T-1`, one `R^m` vector
/// per token prefix in `O^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedControls {
    horizon: usize,
    vocab: usize,
    /// `values[t][w]` for prefix code `w` of length `t`.
    values: Vec<Vec<DVector<f64>>>,
}

impl AdaptedControls {
    pub fn new(horizon: usize, vocab: usize, values: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        if values.len() != horizon {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: horizon,
            });
        }
        for (t, table) in values.iter().enumerate() {
            if table.len() != prefix_count(vocab, t) {
                return Err(Error::LengthMismatch {
                    left: table.len(),
                    right: prefix_count(vocab, t),
                });
            }
        }
        Ok(Self {
            horizon,
            vocab,
            values,
        })
    }

    pub fn zero(horizon: usize, vocab: usize, m: usize) -> Self {
        let values = (0..horizon)
            .map(|t| vec![DVector::zeros(m); prefix_count(vocab, t)])
            .collect();
        Self {
            horizon,
            vocab,
            values,
        }
    }

    /// Independent uniform entries in `[-scale, scale]`, reproducible.
    pub fn random(horizon: usize, vocab: usize, m: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..horizon)
            .map(|t| {
                (0..prefix_count(vocab, t))
                    .map(|_| DVector::from_fn(m, |_, _| rng.gen_range(-scale..scale)))
                    .collect()
            })
            .collect();
        Self {
            horizon,
            vocab,
            values,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn get(&self, t: usize, prefix: usize) -> &DVector<f64> {
        &self.values[t][prefix]
    }

    pub fn table(&self, t: usize) -> &[DVector<f64>] {
        &self.values[t]
    }
}

/// A terminal condition `F ∈ Z_T`: one function on states per length-`T`
/// token path.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCondition {
    horizon: usize,
    vocab: usize,
    table: Vec<DVector<f64>>,
}

impl TerminalCondition {
    pub fn new(horizon: usize, vocab: usize, table: Vec<DVector<f64>>) -> Result<Self> {
        if table.len() != prefix_count(vocab, horizon) {
            return Err(Error::LengthMismatch {
                left: table.len(),
                right: prefix_count(vocab, horizon),
            });
        }
        Ok(Self {
            horizon,
            vocab,
            table,
        })
    }

    /// The same deterministic `f` regardless of the observed path.
    pub fn deterministic(f: DVector<f64>, horizon: usize, vocab: usize) -> Self {
        Self {
            horizon,
            vocab,
            table: vec![f; prefix_count(vocab, horizon)],
        }
    }

    /// `F(x) = C(x, z*)`, the statistic whose conditional expectation is the
    /// next-token probability of `z*`.
    pub fn prediction(model: &HmmModel, z_star: usize, horizon: usize) -> Result<Self> {
        let column = model.emission_column(z_star)?;
        Ok(Self::deterministic(column, horizon, model.vocab_size()))
    }

    /// Independent uniform entries in `[-scale, scale]`, reproducible.
    pub fn random(d: usize, horizon: usize, vocab: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..prefix_count(vocab, horizon))
            .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-scale..scale)))
            .collect();
        Self {
            horizon,
            vocab,
            table,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn get(&self, prefix: usize) -> &DVector<f64> {
        &self.table[prefix]
    }
}

/// Solution pair of the backward equation: `y[t][w]` is the function-valued
/// `Y_t` at prefix `w`, and `v[t][w]` the `m × d` martingale representation
/// term, for `t = 0 .. T-1` (plus `y[T] = F`).
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y: Vec<Vec<DVector<f64>>>,
    pub v: Vec<Vec<DMatrix<f64>>>,
}

impl BsdeSolution {
    /// The deterministic time-zero function.
    pub fn y0(&self) -> &DVector<f64> {
        &self.y[0][0]
    }
}

// ---------------------------------------------------------------------------
// Joint law enumeration
// ---------------------------------------------------------------------------

/// The full joint law of `(X_0..X_T, Z_1..Z_T)` as an explicit list of path
/// masses. States and tokens are coded in base `d` and base `m+1` with the
/// earliest index most significant.
#[derive(Debug, Clone)]
pub struct JointLaw {
    pub horizon: usize,
    pub num_states: usize,
    pub vocab: usize,
    /// `(state_code, token_code, mass)` triples.
    pub entries: Vec<(u64, u64, f64)>,
}

impl JointLaw {
    pub fn state_at(&self, state_code: u64, t: usize) -> usize {
        let shift = (self.num_states as u64).pow((self.horizon - t) as u32);
        ((state_code / shift) % self.num_states as u64) as usize
    }

    /// Token prefix code of length `t` (leading digits of the path code).
    pub fn token_prefix(&self, token_code: u64, t: usize) -> usize {
        let shift = (self.vocab as u64).pow((self.horizon - t) as u32);
        (token_code / shift) as usize
    }

    pub fn token_at(&self, token_code: u64, t: usize) -> usize {
        debug_assert!(t >= 1);
        (self.token_prefix(token_code, t) % self.vocab) as usize
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.2).sum()
    }
}

/// Enumerates every `(state path, token path)` pair with its mass
/// `μ(x_0) Π A(x_t, x_{t+1}) Π C(x_t, z_{t+1})`.
pub fn enumerate_joint_law(model: &HmmModel, horizon: usize) -> Result<JointLaw> {
    check_guard(model, horizon)?;
    let d = model.num_states();
    let vocab = model.vocab_size();
    let mut entries = Vec::new();

    fn recurse(
        model: &HmmModel,
        horizon: usize,
        depth: usize,
        x: usize,
        state_code: u64,
        token_code: u64,
        mass: f64,
        entries: &mut Vec<(u64, u64, f64)>,
    ) {
        if depth == horizon {
            entries.push((state_code, token_code, mass));
            return;
        }
        let d = model.num_states();
        let vocab = model.vocab_size();
        for z in 0..vocab {
            let emit = model.emission()[(x, z)];
            for x_next in 0..d {
                recurse(
                    model,
                    horizon,
                    depth + 1,
                    x_next,
                    state_code * d as u64 + x_next as u64,
                    token_code * vocab as u64 + z as u64,
                    mass * emit * model.transition()[(x, x_next)],
                    entries,
                );
            }
        }
    }

    for x0 in 0..d {
        recurse(
            model,
            horizon,
            0,
            x0,
            x0 as u64,
            0,
            model.prior().weights()[x0],
            &mut entries,
        );
    }
    Ok(JointLaw {
        horizon,
        num_states: d,
        vocab,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Backward solve
// ---------------------------------------------------------------------------

/// Solves the backward equation for given controls and terminal condition.
///
/// At each `(t, prefix, x)` the continuation values `z ↦ (A Y_{t+1})(x)`
/// split uniquely into a mean and lattice coordinates; the coordinates are
/// `V_t(x)` and the mean plus `cᵀ(x)(U_t + V_t(x))` is `Y_t(x)`. Plugging
/// the pair back into the dynamic constraint leaves a zero residual for
/// every continuation token.
pub fn bsde_solve(
    model: &HmmModel,
    controls: &AdaptedControls,
    terminal: &TerminalCondition,
) -> Result<BsdeSolution> {
    let horizon = terminal.horizon();
    check_guard(model, horizon)?;
    if controls.horizon() != horizon {
        return Err(Error::LengthMismatch {
            left: controls.horizon(),
            right: horizon,
        });
    }
    let d = model.num_states();
    let vocab = model.vocab_size();
    let m = vocab - 1;
    let moments = build_moments(model);
    let a = model.transition();

    let mut y: Vec<Vec<DVector<f64>>> = vec![Vec::new(); horizon + 1];
    let mut v: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); horizon];
    y[horizon] = terminal.table.clone();

    for t in (0..horizon).rev() {
        let count = prefix_count(vocab, t);
        let mut y_t = Vec::with_capacity(count);
        let mut v_t = Vec::with_capacity(count);
        for w in 0..count {
            // Continuation values under each token, propagated through A.
            let a_children: Vec<DVector<f64>> =
                (0..vocab).map(|z| a * &y[t + 1][w * vocab + z]).collect();

            let mut v_w = DMatrix::zeros(m, d);
            let mut y_w = DVector::zeros(d);
            let u = controls.get(t, w);
            for x in 0..d {
                let s: Vec<f64> = (0..vocab).map(|z| a_children[z][x]).collect();
                let (mean, tilde) = decompose(&s);
                let cx = moments.c(x);
                y_w[x] = mean + cx.dot(&(u + &tilde));
                v_w.set_column(x, &tilde);
            }
            y_t.push(y_w);
            v_t.push(v_w);
        }
        y[t] = y_t;
        v[t] = v_t;
    }

    Ok(BsdeSolution { y, v })
}

// ---------------------------------------------------------------------------
// Cost functional and duality quantities
// ---------------------------------------------------------------------------

/// The control cost and the estimation errors it is dual to.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    /// `J_T(U; F) = initial_variance + running`.
    pub total: f64,
    /// `var(Y_0(X_0))` under the prior.
    pub initial_variance: f64,
    /// Expected accumulated running cost.
    pub running: f64,
    /// `E |F(X_T) - S_T|²` for the induced estimator `S_T`.
    pub mse: f64,
    /// `E |F(X_T) - π_T(F)|²` with the forward-filter posterior.
    pub mmse: f64,
}

/// Partial sums `S_t = c_0 - Σ_{s≤t} U_{s-1}ᵀ e(z_s)` per prefix, for
/// `t = 0 .. T`.
fn estimator_tables(
    controls: &AdaptedControls,
    vocab: usize,
    horizon: usize,
    c0: f64,
) -> Vec<Vec<f64>> {
    let mut tables = Vec::with_capacity(horizon + 1);
    tables.push(vec![c0]);
    for t in 0..horizon {
        let prev = &tables[t];
        let mut next = vec![0.0; prefix_count(vocab, t + 1)];
        for (w, &s) in prev.iter().enumerate() {
            let u = controls.get(t, w);
            for z in 0..vocab {
                next[w * vocab + z] = s - dot_encoded(u, z);
            }
        }
        tables.push(next);
    }
    tables
}

/// Evaluates `J_T(U; F)` exactly, along with the estimator and filter
/// mean-squared errors it is compared to.
pub fn cost_j(
    model: &HmmModel,
    controls: &AdaptedControls,
    terminal: &TerminalCondition,
) -> Result<CostBreakdown> {
    let solution = bsde_solve(model, controls, terminal)?;
    cost_j_with_solution(model, controls, terminal, &solution)
}

/// [`cost_j`] for an already-computed solution pair.
pub fn cost_j_with_solution(
    model: &HmmModel,
    controls: &AdaptedControls,
    terminal: &TerminalCondition,
    solution: &BsdeSolution,
) -> Result<CostBreakdown> {
    let horizon = terminal.horizon();
    let vocab = model.vocab_size();
    let d = model.num_states();
    let moments = build_moments(model);
    let a = model.transition();
    let law = enumerate_joint_law(model, horizon)?;

    let mu = model.prior();
    let y0 = solution.y0();
    let mu_y0 = mu.expect(y0);
    let initial_variance = mu.expect(&y0.component_mul(y0)) - mu_y0 * mu_y0;

    // Per-(t, prefix) tables used by the running cost.
    let gamma_tables: Vec<Vec<DVector<f64>>> = (1..=horizon)
        .map(|t| solution.y[t].iter().map(|yf| gamma_apply(a, yf)).collect())
        .collect();
    let quad_tables: Vec<Vec<DVector<f64>>> = (0..horizon)
        .map(|t| {
            solution.v[t]
                .iter()
                .enumerate()
                .map(|(w, vw)| {
                    let u = controls.get(t, w);
                    DVector::from_fn(d, |x, _| {
                        let total = u + &vw.column(x).into_owned();
                        (total.transpose() * moments.r(x) * &total)[(0, 0)]
                    })
                })
                .collect()
        })
        .collect();

    let estimators = estimator_tables(controls, vocab, horizon, mu_y0);

    // Forward-filter posterior at the horizon, per positive-mass token path.
    let num_paths = prefix_count(vocab, horizon);
    let mut pi_terminal: Vec<Option<Measure>> = vec![None; num_paths];
    {
        let mut frontier: Vec<Option<Measure>> = vec![Some(mu.clone())];
        for t in 0..horizon {
            let mut next: Vec<Option<Measure>> = vec![None; prefix_count(vocab, t + 1)];
            for (w, entry) in frontier.iter().enumerate() {
                let Some(pi) = entry else { continue };
                for z in 0..vocab {
                    if let Ok(stepped) = forward_step(pi, model, z) {
                        next[w * vocab + z] = Some(stepped);
                    }
                }
            }
            frontier = next;
        }
        for (w, entry) in frontier.into_iter().enumerate() {
            pi_terminal[w] = entry;
        }
    }

    let mut running = 0.0;
    let mut mse = 0.0;
    let mut mmse = 0.0;
    for &(state_code, token_code, mass) in &law.entries {
        if mass == 0.0 {
            continue;
        }
        let mut path_cost = 0.0;
        for t in 0..horizon {
            let x_t = law.state_at(state_code, t);
            let w_t = law.token_prefix(token_code, t);
            let w_next = law.token_prefix(token_code, t + 1);
            path_cost += gamma_tables[t][w_next][x_t] + quad_tables[t][w_t][x_t];
        }
        running += mass * path_cost;

        let x_terminal = law.state_at(state_code, horizon);
        let f_terminal = terminal.get(token_code as usize)[x_terminal];
        let s_terminal = estimators[horizon][token_code as usize];
        mse += mass * (f_terminal - s_terminal) * (f_terminal - s_terminal);

        let pi = pi_terminal[token_code as usize]
            .as_ref()
            .expect("positive-mass path has a posterior");
        let filter_estimate = pi.expect(terminal.get(token_code as usize));
        mmse += mass * (f_terminal - filter_estimate) * (f_terminal - filter_estimate);
    }

    Ok(CostBreakdown {
        total: initial_variance + running,
        initial_variance,
        running,
        mse,
        mmse,
    })
}

/// `E |F(X_T) - S_T|²` for the estimator built from an arbitrary constant
/// `c_0` instead of `μ(Y_0)`.
pub fn estimator_mse_with_constant(
    model: &HmmModel,
    controls: &AdaptedControls,
    terminal: &TerminalCondition,
    c0: f64,
) -> Result<f64> {
    let horizon = terminal.horizon();
    let vocab = model.vocab_size();
    let law = enumerate_joint_law(model, horizon)?;
    let estimators = estimator_tables(controls, vocab, horizon, c0);
    let mut mse = 0.0;
    for &(state_code, token_code, mass) in &law.entries {
        if mass == 0.0 {
            continue;
        }
        let x_terminal = law.state_at(state_code, horizon);
        let f_terminal = terminal.get(token_code as usize)[x_terminal];
        let err = f_terminal - estimators[horizon][token_code as usize];
        mse += mass * err * err;
    }
    Ok(mse)
}

// ---------------------------------------------------------------------------
// Optimal closed loop
// ---------------------------------------------------------------------------

/// Forward-filter posteriors for every prefix; `None` marks prefixes of zero
/// probability.
fn posterior_tables(
    model: &HmmModel,
    horizon: usize,
) -> Vec<Vec<Option<Measure>>> {
    let vocab = model.vocab_size();
    let mut tables: Vec<Vec<Option<Measure>>> = Vec::with_capacity(horizon + 1);
    tables.push(vec![Some(model.prior().clone())]);
    for t in 0..horizon {
        let mut next: Vec<Option<Measure>> = vec![None; prefix_count(vocab, t + 1)];
        for (w, entry) in tables[t].iter().enumerate() {
            let Some(pi) = entry else { continue };
            for z in 0..vocab {
                if let Ok(stepped) = forward_step(pi, model, z) {
                    next[w * vocab + z] = Some(stepped);
                }
            }
        }
        tables.push(next);
    }
    tables
}

/// Solves the closed loop: at each `(t, prefix)` the control is the
/// stagewise minimizer evaluated at the true forward-filter posterior, and
/// the backward equation is advanced with that control. Zero-probability
/// prefixes carry zero control.
pub fn solve_closed_loop(
    model: &HmmModel,
    terminal: &TerminalCondition,
) -> Result<(AdaptedControls, BsdeSolution)> {
    let horizon = terminal.horizon();
    check_guard(model, horizon)?;
    let d = model.num_states();
    let vocab = model.vocab_size();
    let m = vocab - 1;
    let moments = build_moments(model);
    let a = model.transition();
    let posteriors = posterior_tables(model, horizon);

    let mut y: Vec<Vec<DVector<f64>>> = vec![Vec::new(); horizon + 1];
    let mut v: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); horizon];
    let mut u: Vec<Vec<DVector<f64>>> = vec![Vec::new(); horizon];
    y[horizon] = terminal.table.clone();

    for t in (0..horizon).rev() {
        let count = prefix_count(vocab, t);
        let mut y_t = Vec::with_capacity(count);
        let mut v_t = Vec::with_capacity(count);
        let mut u_t = Vec::with_capacity(count);
        for w in 0..count {
            let a_children: Vec<DVector<f64>> =
                (0..vocab).map(|z| a * &y[t + 1][w * vocab + z]).collect();

            let mut v_w = DMatrix::zeros(m, d);
            let mut mean_part = DVector::zeros(d);
            for x in 0..d {
                let s: Vec<f64> = (0..vocab).map(|z| a_children[z][x]).collect();
                let (mean, tilde) = decompose(&s);
                mean_part[x] = mean;
                v_w.set_column(x, &tilde);
            }

            let u_w = match &posteriors[t][w] {
                Some(pi) => optimal_control_general(pi, &mean_part, &v_w, &moments),
                None => DVector::zeros(m),
            };

            let mut y_w = DVector::zeros(d);
            for x in 0..d {
                let cx = moments.c(x);
                y_w[x] = mean_part[x] + cx.dot(&(&u_w + &v_w.column(x).into_owned()));
            }
            y_t.push(y_w);
            v_t.push(v_w);
            u_t.push(u_w);
        }
        y[t] = y_t;
        v[t] = v_t;
        u[t] = u_t;
    }

    let controls = AdaptedControls::new(horizon, vocab, u)?;
    Ok((controls, BsdeSolution { y, v }))
}

/// Max deviation of the running representation
/// `π_t(Y_t) = μ(Y_0) - Σ_{s≤t} U_{s-1}ᵀ e(z_s)` over all times and all
/// positive-probability prefixes, for the closed-loop solution.
pub fn representation_check(model: &HmmModel, terminal: &TerminalCondition) -> Result<f64> {
    let horizon = terminal.horizon();
    let vocab = model.vocab_size();
    let (controls, solution) = solve_closed_loop(model, terminal)?;
    let posteriors = posterior_tables(model, horizon);
    let mu_y0 = model.prior().expect(solution.y0());
    let estimators = estimator_tables(&controls, vocab, horizon, mu_y0);

    let mut max_dev = 0.0f64;
    for t in 1..=horizon {
        for (w, entry) in posteriors[t].iter().enumerate() {
            let Some(pi) = entry else { continue };
            let lhs = pi.expect(&solution.y[t][w]);
            let rhs = estimators[t][w];
            max_dev = max_dev.max((lhs - rhs).abs());
        }
    }
    Ok(max_dev)
}

/// Expected accumulated suboptimality penalty
/// `E Σ_t ⟨U_t - U_t^opt, U_t - U_t^opt⟩_{p_t}`, the quantity that accounts
/// for the gap between `J_T(U; F)` and the MMSE.
pub fn expected_control_penalty(
    model: &HmmModel,
    controls: &AdaptedControls,
    optimal: &AdaptedControls,
) -> Result<f64> {
    let horizon = controls.horizon();
    if optimal.horizon() != horizon {
        return Err(Error::LengthMismatch {
            left: optimal.horizon(),
            right: horizon,
        });
    }
    check_guard(model, horizon)?;
    let vocab = model.vocab_size();
    let posteriors = posterior_tables(model, horizon);

    // Prefix probabilities via the chain rule on filter predictions.
    let mut prefix_prob: Vec<Vec<f64>> = Vec::with_capacity(horizon + 1);
    prefix_prob.push(vec![1.0]);
    for t in 0..horizon {
        let mut next = vec![0.0; prefix_count(vocab, t + 1)];
        for (w, entry) in posteriors[t].iter().enumerate() {
            let Some(pi) = entry else { continue };
            let p = predict(pi, model);
            for z in 0..vocab {
                next[w * vocab + z] = prefix_prob[t][w] * p[z];
            }
        }
        prefix_prob.push(next);
    }

    let mut penalty = 0.0;
    for t in 0..horizon {
        for (w, entry) in posteriors[t].iter().enumerate() {
            let Some(pi) = entry else { continue };
            let prob = prefix_prob[t][w];
            if prob == 0.0 {
                continue;
            }
            let p: Vec<f64> = predict(pi, model).iter().copied().collect();
            let diff = controls.get(t, w) - optimal.get(t, w);
            penalty += prob * variance_bracket(&diff, &p);
        }
    }
    Ok(penalty)
}
