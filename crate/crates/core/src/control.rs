//! Optimal-control formulas: the general feedback map `φ`, the explicit
//! binary-observation solution, its general-`m` counterpart, and the
//! one-step binary closed form.
//!
//! Two evaluation routes exist for the same optimum. The feedback form
//! [`phi_general`] takes the already-solved dual function `y`; the explicit
//! forms ([`optimal_control_binary`], [`optimal_control_general`]) take the
//! open-loop part `g` (with `y = g + cᵀ(u + v)` implicit) and return the
//! minimizer directly. Substituting the solved `y` into `φ` reproduces the
//! explicit answer.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::geometry::MomentOperators;
use crate::hmm::{HmmModel, Measure};

/// Guard below which `1 - ρ(c)²` is treated as exactly singular.
pub const SINGULARITY_TOL: f64 = 1e-12;
/// Relative singular-value cutoff for the pseudo-inverses.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-12;

/// Feedback-form optimal control
/// `u = -ρ(R)† ( ρ((c - ρ(c)) y) + ρ(R v) )`,
/// with the pseudo-inverse taken by singular-value cutoff.
pub fn phi_general(
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    rho: &Measure,
    moments: &MomentOperators,
) -> DVector<f64> {
    let m = moments.m();
    let d = moments.num_states();
    let weights = rho.weights();
    let mean_c = moments.mean_c(weights);

    let mut rhs = DVector::zeros(m);
    for x in 0..d {
        let w = weights[x];
        if w == 0.0 {
            continue;
        }
        let cx = moments.c(x);
        rhs += (&cx - &mean_c) * (w * y[x]);
        rhs += moments.r(x) * v.column(x) * w;
    }

    -pseudo_solve(&moments.mean_r(weights), &rhs)
}

/// Solves `M u = b` through an SVD pseudo-inverse with relative cutoff.
fn pseudo_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    if sigma_max <= 0.0 {
        return DVector::zeros(b.len());
    }
    svd.solve(b, PINV_RELATIVE_CUTOFF * sigma_max)
        .unwrap_or_else(|_| DVector::zeros(b.len()))
}

/// Linear functional `w` such that the binary optimal control with `v = 0`
/// is `u = wᵀ g`. Returns `None` when `ρ(c)² = 1` (control pinned to 0).
pub fn binary_control_functional(rho: &Measure, c: &DVector<f64>) -> Option<DVector<f64>> {
    let weights = rho.weights();
    let mean_c = weights.dot(c);
    let denom = 1.0 - mean_c * mean_c;
    if denom.abs() <= SINGULARITY_TOL {
        return None;
    }
    Some(DVector::from_fn(weights.len(), |x, _| {
        -weights[x] * (c[x] - mean_c) / denom
    }))
}

/// Explicit binary-observation optimal control
/// `u = -(ρ(gc) - ρ(g)ρ(c) + ρ(v) - ρ(vc)ρ(c)) / (1 - ρ(c)²)`,
/// with `u = 0` in the singular case `ρ(c)² = 1`.
pub fn optimal_control_binary(
    rho: &Measure,
    g: &DVector<f64>,
    v: &DVector<f64>,
    c: &DVector<f64>,
) -> f64 {
    let weights = rho.weights();
    let mean_c = weights.dot(c);
    let denom = 1.0 - mean_c * mean_c;
    if denom.abs() <= SINGULARITY_TOL {
        return 0.0;
    }
    let cov_gc = weights.dot(&g.component_mul(c)) - weights.dot(g) * mean_c;
    let v_term = weights.dot(v) - weights.dot(&v.component_mul(c)) * mean_c;
    -(cov_gc + v_term) / denom
}

/// Columnwise variant for a matrix of terminal conditions: one scalar
/// control per column of `g`, with `v = 0`.
pub fn optimal_control_binary_columns(
    rho: &Measure,
    g: &DMatrix<f64>,
    c: &DVector<f64>,
) -> RowDVector<f64> {
    match binary_control_functional(rho, c) {
        Some(w) => w.transpose() * g,
        None => RowDVector::zeros(g.ncols()),
    }
}

/// Explicit general-`m` optimal control for one stage.
///
/// `g` is the open-loop mean part of the dual function and `v` the `m × d`
/// martingale term, so the stage cost in `u` is
/// `Var_ρ(g + cᵀ(u+v)) + Σ_x ρ(x)(u+v(x))ᵀR(x)(u+v(x))`.
/// Its minimizer solves `M u = -rhs` with the bracket matrix
/// `M = ρ(R + ccᵀ) - ρ(c)ρ(c)ᵀ` (positive semidefinite).
pub fn optimal_control_general(
    rho: &Measure,
    g: &DVector<f64>,
    v: &DMatrix<f64>,
    moments: &MomentOperators,
) -> DVector<f64> {
    let m = moments.m();
    let d = moments.num_states();
    let weights = rho.weights();
    let mean_c = moments.mean_c(weights);

    let mut bracket = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for x in 0..d {
        let w = weights[x];
        if w == 0.0 {
            continue;
        }
        let cx = moments.c(x);
        let vx = v.column(x);
        bracket += (moments.r(x) + &cx * cx.transpose()) * w;
        let h = g[x] + cx.dot(&vx.into_owned());
        rhs += (&cx - &mean_c) * (w * h);
        rhs += moments.r(x) * v.column(x) * w;
    }
    bracket -= &mean_c * mean_c.transpose();

    -pseudo_solve(&bracket, &rhs)
}

/// One-step binary closed form: the optimal weight on the first observation
/// for terminal condition `F = F⁺` on `z = 1` and `F⁻` on `z = 0`.
///
/// With `f = (F⁺+F⁻)/2`, `f̃ = (F⁺-F⁻)/2` and `c(x) = C(x,1) - C(x,0)`:
/// `u₀ = -(μ((Af)(c-μ(c))) + μ(Af̃) - μ((Af̃)c)μ(c)) / (1-μ(c)²)`,
/// and 0 when `μ(c)² = 1`.
pub fn corollary5_closed_form(
    model: &HmmModel,
    f_plus: &DVector<f64>,
    f_minus: &DVector<f64>,
) -> Result<f64> {
    if model.vocab_size() != 2 {
        return Err(Error::NotBinary {
            vocab_size: model.vocab_size(),
        });
    }
    let a = model.transition();
    let mu = model.prior();
    let c = DVector::from_fn(model.num_states(), |x, _| {
        model.emission()[(x, 1)] - model.emission()[(x, 0)]
    });
    let f = (f_plus + f_minus) / 2.0;
    let f_tilde = (f_plus - f_minus) / 2.0;
    let af = a * f;
    let v0 = a * f_tilde;
    Ok(optimal_control_binary(mu, &af, &v0, &c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::build_moments;
    use crate::hmm::random_stochastic_matrix;

    fn random_measure(d: usize, rng: &mut ChaCha8Rng) -> Measure {
        let raw = DVector::from_fn(d, |_, _| rng.gen_range(0.05..1.0));
        Measure::new(raw).unwrap()
    }

    /// Binary model carrying a prescribed signal `c(x) = C(x,1) - C(x,0)`.
    fn binary_model_with_signal(c: &DVector<f64>, prior: &Measure) -> HmmModel {
        let d = c.len();
        let emission = DMatrix::from_fn(d, 2, |x, z| {
            if z == 1 {
                (1.0 + c[x]) / 2.0
            } else {
                (1.0 - c[x]) / 2.0
            }
        });
        HmmModel::new(
            prior.weights().clone(),
            random_stochastic_matrix(d, d, 1.0, 17),
            emission,
        )
        .unwrap()
    }

    #[test]
    fn constant_dual_function_needs_no_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 4;
        let rho = random_measure(d, &mut rng);
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.9..0.9));
        let model = binary_model_with_signal(&c, &rho);
        let moments = build_moments(&model);

        let y = DVector::from_element(d, 3.3);
        let v = DMatrix::zeros(1, d);
        let u = phi_general(&y, &v, &rho, &moments);
        assert!(u.amax() < 1e-12);

        let u = optimal_control_binary(&rho, &y, &DVector::zeros(d), &c);
        assert!(u.abs() < 1e-12);
    }

    #[test]
    fn point_mass_measure_gives_zero_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let rho = Measure::dirac(d, 1);
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.9..0.9));
        let model = binary_model_with_signal(&c, &Measure::uniform(d));
        let moments = build_moments(&model);

        let y = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let u = phi_general(&y, &DMatrix::zeros(1, d), &rho, &moments);
        assert!(u.amax() < 1e-12);
        assert!(u.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn singular_guard_returns_zero() {
        // c ≡ 1 on the support of ρ.
        let d = 2;
        let rho = Measure::uniform(d);
        let c = DVector::from_element(d, 1.0);
        let g = DVector::from_vec(vec![0.4, -1.0]);
        assert_eq!(optimal_control_binary(&rho, &g, &DVector::zeros(d), &c), 0.0);
        assert!(binary_control_functional(&rho, &c).is_none());
    }

    #[test]
    fn forced_arithmetic_example() {
        // ρ = (1/2, 1/2), c = (1, -1), g = (1, 0), v = 0:
        // ρ(gc) = 1/2, ρ(g) = 1/2, ρ(c) = 0, so u = -1/2.
        let rho = Measure::uniform(2);
        let c = DVector::from_vec(vec![1.0, -1.0]);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        let u = optimal_control_binary(&rho, &g, &DVector::zeros(2), &c);
        assert!((u + 0.5).abs() < 1e-15);
    }

    #[test]
    fn feedback_form_agrees_with_explicit_binary_solution() {
        // Solve explicitly, then plug the closed-loop dual function back
        // into φ: the two routes must coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let d = rng.gen_range(2usize..6);
            let rho = random_measure(d, &mut rng);
            let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.95..0.95));
            let g = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let model = binary_model_with_signal(&c, &rho);
            let moments = build_moments(&model);

            let u_explicit = optimal_control_binary(&rho, &g, &DVector::zeros(d), &c);
            let y_solved = &g + &c * u_explicit;
            let u_feedback = phi_general(&y_solved, &DMatrix::zeros(1, d), &rho, &moments);
            assert!(
                (u_feedback[0] - u_explicit).abs() < 1e-12,
                "trial {trial}: {u_feedback} vs {u_explicit}"
            );
        }
    }

    #[test]
    fn general_and_binary_explicit_forms_agree_for_m_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let d = rng.gen_range(2usize..6);
            let rho = random_measure(d, &mut rng);
            let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.95..0.95));
            let g = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let v_row = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let model = binary_model_with_signal(&c, &rho);
            let moments = build_moments(&model);

            let u_binary = optimal_control_binary(&rho, &g, &v_row, &c);
            let v = DMatrix::from_fn(1, d, |_, x| v_row[x]);
            let u_general = optimal_control_general(&rho, &g, &v, &moments);
            assert!(
                (u_general[0] - u_binary).abs() < 1e-12,
                "trial {trial}: {} vs {u_binary}",
                u_general[0]
            );
        }
    }

    #[test]
    fn columnwise_control_matches_scalar_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let rho = random_measure(d, &mut rng);
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.9..0.9));
        let g = DMatrix::from_fn(d, 3, |_, _| rng.gen_range(-1.0..1.0));
        let row = optimal_control_binary_columns(&rho, &g, &c);
        for j in 0..3 {
            let u = optimal_control_binary(
                &rho,
                &g.column(j).into_owned(),
                &DVector::zeros(d),
                &c,
            );
            assert!((row[j] - u).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 3;
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-0.9..0.9));
        let model = binary_model_with_signal(&c, &Measure::uniform(d));

        // Equal constant branches carry no information about Z_1.
        let f = DVector::from_element(d, 1.7);
        let u0 = corollary5_closed_form(&model, &f, &f).unwrap();
        assert!(u0.abs() < 1e-12);

        // Degenerate observation channel: c ≡ 1.
        let model = binary_model_with_signal(&DVector::from_element(d, 1.0), &Measure::uniform(d));
        let fp = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let fm = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(corollary5_closed_form(&model, &fp, &fm).unwrap(), 0.0);

        // Non-binary models are rejected.
        let model3 = HmmModel::new(
            DVector::from_element(2, 0.5),
            DMatrix::identity(2, 2),
            random_stochastic_matrix(2, 3, 1.0, 7),
        )
        .unwrap();
        assert!(matches!(
            corollary5_closed_form(&model3, &f, &f),
            Err(Error::NotBinary { vocab_size: 3 })
        ));
    }
}
