use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::SmoothOracle;
use crate::error::{Error, Result};
use crate::linalg::NormOperator;

/// Smoothed maximum `f_μ(x) = μ ln Σᵢ exp((⟨aᵢ, x⟩ − bᵢ)/μ)`.
///
/// The reported Lipschitz constants `L₁ = 1/μ`, `L₂ = 2/μ²`, `L₃ = 4/μ³` are
/// with respect to the Gram norm `B = Σ aᵢaᵢᵀ` (see [`LogSumExp::gram_norm`]).
#[derive(Clone, Debug)]
pub struct LogSumExp {
    a: DMatrix<f64>,
    b: DVector<f64>,
    mu: f64,
}

pub fn logsumexp_oracle(a: DMatrix<f64>, b: DVector<f64>, mu: f64) -> Result<LogSumExp> {
    if !(mu > 0.0) {
        return Err(Error::contract(format!(
            "smoothing mu must be positive, got {mu}"
        )));
    }
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::contract(
            "log-sum-exp needs at least one row and column",
        ));
    }
    Ok(LogSumExp { a, b, mu })
}

impl LogSumExp {
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// `B = Σ aᵢaᵢᵀ`; errors when the rows do not span the space.
    pub fn gram_norm(&self) -> Result<NormOperator> {
        NormOperator::dense(self.a.tr_mul(&self.a))
    }

    /// Softmax weights and the value, stabilized by subtracting the max.
    fn weights(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let z = (&self.a * x - &self.b) / self.mu;
        let zmax = z.max();
        let mut w = z.map(|v| (v - zmax).exp());
        let total = w.sum();
        w /= total;
        (self.mu * (zmax + total.ln()), w)
    }
}

impl SmoothOracle for LogSumExp {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.weights(x).0
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&self.weights(x).1)
    }

    fn value_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, w) = self.weights(x);
        (v, self.a.tr_mul(&w))
    }

    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        let (_, w) = self.weights(x);
        let u = &self.a * h;
        let mean = w.dot(&u);
        let centered = w.component_mul(&u.add_scalar(-mean));
        self.a.tr_mul(&centered) / self.mu
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (_, w) = self.weights(x);
        let g = self.a.tr_mul(&w);
        let mut weighted = self.a.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let h = (self.a.tr_mul(&weighted) - &g * g.transpose()) / self.mu;
        Some((&h + h.transpose()) * 0.5)
    }

    fn lipschitz(&self, p: u32) -> Option<f64> {
        let base = match p {
            1 => 1.0,
            2 => 2.0,
            3 => 4.0,
            _ => return None,
        };
        Some(base / self.mu.powi(p as i32))
    }
}

/// Data of a shifted log-sum-exp instance whose minimizer is the origin.
#[derive(Clone, Debug)]
pub struct ShiftedLogSumExp {
    pub oracle: LogSumExp,
    pub norm: NormOperator,
    pub seed_used: u64,
}

const MAX_ATTEMPTS: u64 = 10;

/// Samples `ãᵢ, b` uniformly on `[−1, 1]` and shifts `aᵢ := ãᵢ − ∇f̃_μ(0)`,
/// so that `∇f_μ(0) = 0`. Retries with a derived seed when the Gram matrix
/// is rank deficient.
pub fn generate_shifted_logsumexp(
    n: usize,
    m: usize,
    mu: f64,
    seed: u64,
) -> Result<ShiftedLogSumExp> {
    if n == 0 || m < n {
        return Err(Error::contract(format!(
            "need m >= n >= 1, got n={n}, m={m}"
        )));
    }
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let seed_used = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(seed_used);
        let a_tilde = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..=1.0));
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..=1.0));
        let preliminary = logsumexp_oracle(a_tilde.clone(), b.clone(), mu)?;
        let shift = preliminary.gradient(&DVector::zeros(n));
        let mut a = a_tilde;
        for mut row in a.row_iter_mut() {
            row -= shift.transpose();
        }
        let oracle = logsumexp_oracle(a, b, mu)?;
        match oracle.gram_norm() {
            Ok(norm) => {
                return Ok(ShiftedLogSumExp {
                    oracle,
                    norm,
                    seed_used,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Numerical("degenerate log-sum-exp data".into())))
}
