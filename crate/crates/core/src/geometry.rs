//! The lattice encoding of tokens and the moment operators derived from the
//! model matrices: `c(x)`, `R(x)`, the conditional-variance operator `Γ`,
//! and the variance bracket.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hmm::HmmModel;

/// Encodes token `z` into `R^m`: the canonical basis vector for `z = 1..m`
/// and the negative sum of all basis vectors for `z = 0`.
pub fn encode(z: usize, m: usize) -> Result<DVector<f64>> {
    if z > m {
        return Err(Error::TokenOutOfRange {
            token: z,
            vocab_size: m + 1,
        });
    }
    let mut e = DVector::zeros(m);
    if z == 0 {
        e.fill(-1.0);
    } else {
        e[z - 1] = 1.0;
    }
    Ok(e)
}

/// `uᵀ e(z)` without materializing the encoded vector.
pub fn dot_encoded(u: &DVector<f64>, z: usize) -> f64 {
    if z == 0 {
        -u.sum()
    } else {
        u[z - 1]
    }
}

/// Splits a function `s` on the vocabulary into its mean and the unique
/// lattice coordinates: `s(z) = s̄ + s̃ᵀ e(z)` for every token `z`.
///
/// `s` must have length `m + 1`, indexed by token.
pub fn decompose(s: &[f64]) -> (f64, DVector<f64>) {
    let m = s.len() - 1;
    let mean = s.iter().sum::<f64>() / (m + 1) as f64;
    let tilde = DVector::from_fn(m, |i, _| s[i + 1] - mean);
    (mean, tilde)
}

/// Per-state moment data computed from an emission matrix:
/// `c(x)_i = C(x, i) - C(x, 0)` and the conditional covariance
/// `R(x) = diag(c(x)) + C(x, 0)(I + 11ᵀ) - c(x)c(x)ᵀ`.
#[derive(Debug, Clone)]
pub struct MomentOperators {
    /// `m × d`; column `x` is `c(x)`.
    c_columns: DMatrix<f64>,
    /// One `m × m` matrix per state.
    r_matrices: Vec<DMatrix<f64>>,
}

impl MomentOperators {
    pub fn m(&self) -> usize {
        self.c_columns.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.c_columns.ncols()
    }

    /// `c(x)` for state `x`.
    pub fn c(&self, x: usize) -> DVector<f64> {
        self.c_columns.column(x).into_owned()
    }

    /// The `m × d` matrix whose column `x` is `c(x)`.
    pub fn c_columns(&self) -> &DMatrix<f64> {
        &self.c_columns
    }

    pub fn r(&self, x: usize) -> &DMatrix<f64> {
        &self.r_matrices[x]
    }

    /// `ρ(c) = Σ_x ρ(x) c(x)`.
    pub fn mean_c(&self, rho: &DVector<f64>) -> DVector<f64> {
        &self.c_columns * rho
    }

    /// `ρ(R) = Σ_x ρ(x) R(x)`.
    pub fn mean_r(&self, rho: &DVector<f64>) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for (x, r) in self.r_matrices.iter().enumerate() {
            out += r * rho[x];
        }
        out
    }
}

/// Builds the moment operators for a model.
pub fn build_moments(model: &HmmModel) -> MomentOperators {
    let d = model.num_states();
    let m = model.vocab_size() - 1;
    let emission = model.emission();

    let c_columns = DMatrix::from_fn(m, d, |i, x| emission[(x, i + 1)] - emission[(x, 0)]);

    let ones = DMatrix::from_element(m, m, 1.0);
    let eye = DMatrix::identity(m, m);
    let r_matrices = (0..d)
        .map(|x| {
            let c = c_columns.column(x);
            let c0 = emission[(x, 0)];
            DMatrix::from_diagonal(&c.into_owned()) + (&eye + &ones) * c0 - &c * c.transpose()
        })
        .collect();

    MomentOperators {
        c_columns,
        r_matrices,
    }
}

/// The conditional-variance operator of the transition matrix:
/// `(Γf)(x) = Σ_y A(x,y) f(y)² - (Af)(x)²`.
pub fn gamma_apply(transition: &DMatrix<f64>, f: &DVector<f64>) -> DVector<f64> {
    let f_sq = f.component_mul(f);
    let second = transition * f_sq;
    let first = transition * f;
    second - first.component_mul(&first)
}

/// Variance of the augmented vector `((-1ᵀu), u)` under the probability
/// vector `q` on the vocabulary; the penalty paid per unit of suboptimality.
pub fn variance_bracket(u: &DVector<f64>, q: &[f64]) -> f64 {
    let m = u.len();
    debug_assert_eq!(q.len(), m + 1);
    let head = -u.sum();
    let mut second_moment = q[0] * head * head;
    let mut mean = q[0] * head;
    for i in 0..m {
        second_moment += q[i + 1] * u[i] * u[i];
        mean += q[i + 1] * u[i];
    }
    second_moment - mean * mean
}

/// The per-step binary reduction used by the dual filter:
/// `c(x) = 2 C(x, z) - 1`, the gap between emitting `z` and not emitting it.
pub fn binary_reduce(model: &HmmModel, z: usize) -> Result<DVector<f64>> {
    if z >= model.vocab_size() {
        return Err(Error::TokenOutOfRange {
            token: z,
            vocab_size: model.vocab_size(),
        });
    }
    Ok(DVector::from_fn(model.num_states(), |x, _| {
        2.0 * model.emission()[(x, z)] - 1.0
    }))
}
