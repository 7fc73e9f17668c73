//! HMM model representation, validation, sampling, and the structured model
//! generators used by the experiment harness.
//!
//! State indices are 0-based throughout. The vocabulary is `{0, .., m}` so a
//! model with `vocab_size = m + 1` emits tokens `< vocab_size`.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-sum deviations up to this tolerance are silently renormalized.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Entries below this are rejected as negative; above it they are clamped to 0.
pub const NEGATIVE_TOL: f64 = -1e-12;

// ---------------------------------------------------------------------------
// Measures
// ---------------------------------------------------------------------------

/// A probability measure on the state space, stored as a dense weight vector.
///
/// Construction normalizes, so the weights sum to 1 up to one rounding of the
/// division (well within 1e-12).
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: DVector<f64>,
}

impl Measure {
    /// Validates nonnegativity and a strictly positive total, then normalizes.
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < NEGATIVE_TOL {
                return Err(Error::NegativeEntry {
                    location: format!("measure[{i}]"),
                    value: w,
                });
            }
        }
        let clipped = weights.map(|w| w.max(0.0));
        let total: f64 = clipped.sum();
        if total <= 0.0 {
            return Err(Error::RowSumError {
                location: "measure".to_string(),
                sum: total,
            });
        }
        Ok(Self {
            weights: clipped / total,
        })
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            weights: DVector::from_element(dim, 1.0 / dim as f64),
        }
    }

    /// Point mass on state `x`.
    pub fn dirac(dim: usize, x: usize) -> Self {
        let mut w = DVector::zeros(dim);
        w[x] = 1.0;
        Self { weights: w }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// The expectation `ρ(f) = Σ_x ρ(x) f(x)`.
    pub fn expect(&self, f: &DVector<f64>) -> f64 {
        self.weights.dot(f)
    }
}

/// An unconstrained signed measure (any finite weight vector).
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMeasure {
    pub weights: DVector<f64>,
}

impl SignedMeasure {
    pub fn new(weights: DVector<f64>) -> Self {
        Self { weights }
    }
}

impl From<Measure> for SignedMeasure {
    fn from(m: Measure) -> Self {
        Self { weights: m.weights }
    }
}

// ---------------------------------------------------------------------------
// Token sequences and sample paths
// ---------------------------------------------------------------------------

/// An observation path `z_1 .. z_T` with every token `< vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        for &z in &tokens {
            if z >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: z,
                    vocab_size,
                });
            }
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

/// A jointly sampled state/token path, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    /// `X_0 .. X_T` (0-based states).
    pub states: Vec<usize>,
    /// `Z_1 .. Z_T`.
    pub tokens: TokenSequence,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// A hidden Markov model `(μ, A, C)` with `d` states and `m + 1` tokens.
///
/// `transition` is the row-stochastic `d × d` matrix `A` and `emission` the
/// row-stochastic `d × (m+1)` matrix `C`; both are validated and, for row
/// sums within [`ROW_SUM_TOL`] of 1, renormalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    num_states: usize,
    vocab_size: usize,
    prior: Measure,
    transition: DMatrix<f64>,
    emission: DMatrix<f64>,
    renormalized_rows: usize,
}

impl HmmModel {
    /// Validates raw model data and returns the model.
    ///
    /// Rows whose sums deviate from 1 by at most [`ROW_SUM_TOL`] are
    /// renormalized; the number of such rows is recorded and available via
    /// [`HmmModel::renormalized_rows`]. Larger deviations, negative entries
    /// (below [`NEGATIVE_TOL`]) and dimension mismatches are errors.
    pub fn new(
        prior: DVector<f64>,
        transition: DMatrix<f64>,
        emission: DMatrix<f64>,
    ) -> Result<Self> {
        let d = prior.len();
        if d == 0 {
            return Err(Error::DimensionMismatch {
                context: "prior",
                expected: "length >= 1".to_string(),
                got: "0".to_string(),
            });
        }
        if transition.nrows() != d || transition.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "transition",
                expected: format!("{d}x{d}"),
                got: format!("{}x{}", transition.nrows(), transition.ncols()),
            });
        }
        if emission.nrows() != d || emission.ncols() < 2 {
            return Err(Error::DimensionMismatch {
                context: "emission",
                expected: format!("{d}x(m+1), m+1 >= 2"),
                got: format!("{}x{}", emission.nrows(), emission.ncols()),
            });
        }
        let vocab_size = emission.ncols();

        let mut warnings = 0usize;
        let mut transition = transition;
        let mut emission = emission;
        warnings += validate_rows(&mut transition, "transition")?;
        warnings += validate_rows(&mut emission, "emission")?;

        for (i, &w) in prior.iter().enumerate() {
            if !w.is_finite() || w < NEGATIVE_TOL {
                return Err(Error::NegativeEntry {
                    location: format!("prior[{i}]"),
                    value: w,
                });
            }
        }
        let prior_sum: f64 = prior.sum();
        if (prior_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::RowSumError {
                location: "prior".to_string(),
                sum: prior_sum,
            });
        }
        if (prior_sum - 1.0).abs() > 0.0 {
            warnings += 1;
        }
        let prior = Measure::new(prior)?;

        Ok(Self {
            num_states: d,
            vocab_size,
            prior,
            transition,
            emission,
            renormalized_rows: warnings,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// `m + 1`, the number of distinct tokens.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prior(&self) -> &Measure {
        &self.prior
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn emission(&self) -> &DMatrix<f64> {
        &self.emission
    }

    /// Number of rows (plus prior) that needed renormalization during
    /// validation.
    pub fn renormalized_rows(&self) -> usize {
        self.renormalized_rows
    }

    /// Emission column `C(:, z)` as an owned vector.
    pub fn emission_column(&self, z: usize) -> Result<DVector<f64>> {
        if z >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: z,
                vocab_size: self.vocab_size,
            });
        }
        Ok(self.emission.column(z).into_owned())
    }

    /// Samples `X_0 ~ μ`, then alternates `Z_{t+1} ~ C(X_t, ·)` and
    /// `X_{t+1} ~ A(X_t, ·)` for `t = 0 .. T-1`. Deterministic given the seed.
    pub fn sample_path(&self, horizon: usize, seed: u64) -> SamplePath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut tokens = Vec::with_capacity(horizon);

        let mut x = sample_categorical(&mut rng, self.prior.weights().iter().copied());
        states.push(x);
        for _ in 0..horizon {
            let z = sample_categorical(&mut rng, self.emission.row(x).iter().copied());
            tokens.push(z);
            x = sample_categorical(&mut rng, self.transition.row(x).iter().copied());
            states.push(x);
        }

        SamplePath {
            states,
            tokens: TokenSequence::new(tokens, self.vocab_size)
                .expect("sampled tokens are in range"),
            seed,
        }
    }
}

fn validate_rows(matrix: &mut DMatrix<f64>, name: &'static str) -> Result<usize> {
    let mut warnings = 0usize;
    for i in 0..matrix.nrows() {
        let mut sum = 0.0;
        for j in 0..matrix.ncols() {
            let v = matrix[(i, j)];
            if !v.is_finite() || v < NEGATIVE_TOL {
                return Err(Error::NegativeEntry {
                    location: format!("{name}[{i},{j}]"),
                    value: v,
                });
            }
            sum += v.max(0.0);
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::RowSumError {
                location: format!("{name} row {i}"),
                sum,
            });
        }
        if (sum - 1.0).abs() > 0.0 {
            warnings += 1;
        }
        for j in 0..matrix.ncols() {
            matrix[(i, j)] = matrix[(i, j)].max(0.0) / sum;
        }
    }
    Ok(warnings)
}

/// Inverse-CDF draw from a finite distribution given one uniform variate.
fn sample_categorical<I: Iterator<Item = f64>>(rng: &mut impl Rng, weights: I) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack past the last cumulative sum.
    last
}

// ---------------------------------------------------------------------------
// Model generators
// ---------------------------------------------------------------------------

/// Row-stochastic matrix with each row `softmax(randn(cols) / temperature)`.
///
/// All entries are strictly positive, and the output is bit-identical across
/// runs for a fixed seed.
pub fn random_stochastic_matrix(
    rows: usize,
    cols: usize,
    temperature: f64,
    seed: u64,
) -> DMatrix<f64> {
    assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
    assert!(
        temperature > 0.0,
        "temperature must be positive, got {temperature}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let logits: Vec<f64> = (0..cols)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                g / temperature
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..cols {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// The cyclic permutation matrix: `A(x, x') = 1` iff `x' = x + 1 (mod d)`.
pub fn circulant_permutation(d: usize) -> DMatrix<f64> {
    assert!(d >= 1);
    DMatrix::from_fn(d, d, |x, x_next| {
        if x_next == (x + 1) % d {
            1.0
        } else {
            0.0
        }
    })
}

/// Convex combination `α A^(circ) + (1 - α) A^(stoch)` of the cyclic
/// permutation with a given stochastic matrix.
pub fn homotopy_transition(alpha: f64, a_stoch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange { alpha });
    }
    let d = a_stoch.nrows();
    if a_stoch.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "homotopy_transition",
            expected: "square matrix".to_string(),
            got: format!("{}x{}", d, a_stoch.ncols()),
        });
    }
    let circ = circulant_permutation(d);
    Ok(circ * alpha + a_stoch * (1.0 - alpha))
}

// ---------------------------------------------------------------------------
// Spectrum
// ---------------------------------------------------------------------------

/// Full complex spectrum sorted by magnitude descending (ties broken by real
/// part descending), together with the magnitude of the second entry.
///
/// For a `1 × 1` matrix the second eigenvalue does not exist and its
/// magnitude is reported as 0.
pub fn second_eigenvalue_magnitude(matrix: &DMatrix<f64>) -> Result<(f64, Vec<Complex<f64>>)> {
    assert_eq!(matrix.nrows(), matrix.ncols(), "matrix must be square");
    let schur =
        Schur::try_new(matrix.clone(), f64::EPSILON, 10_000).ok_or(Error::EigenFailure)?;
    let eigs = schur.complex_eigenvalues();
    let mut spectrum: Vec<Complex<f64>> = eigs.iter().copied().collect();
    spectrum.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap()
            .then(b.re.partial_cmp(&a.re).unwrap())
    });
    let lambda2 = if spectrum.len() >= 2 {
        spectrum[1].norm()
    } else {
        0.0
    };
    Ok((lambda2, spectrum))
}
