use nalgebra::{DMatrix, DVector};

use super::oracle::SmoothOracle;
use crate::error::{Error, Result};
use crate::linalg::sym_eigendecomposition;

/// `f(x) = |x⁽¹⁾|^q + Σᵢ₌₂ⁿ |x⁽ⁱ⁾ − c·x⁽ⁱ⁻¹⁾|^q`, i.e. `Σ φ((Sx)ᵢ)` with
/// `φ(t) = |t|^q` and `S` the lower bidiagonal difference operator.
///
/// Minimized at the origin with value zero.
#[derive(Clone, Debug)]
pub struct PoweredChain {
    n: usize,
    q: f64,
    c: f64,
    s_norm_sq: f64,
}

pub fn powered_chain_oracle(n: usize, q: f64, c: f64) -> Result<PoweredChain> {
    if n == 0 {
        return Err(Error::contract("powered chain needs n >= 1"));
    }
    if !(q >= 2.0) {
        return Err(Error::contract(format!(
            "powered chain needs q >= 2, got {q}"
        )));
    }
    if !c.is_finite() {
        return Err(Error::contract("chain coupling must be finite"));
    }
    let mut chain = PoweredChain {
        n,
        q,
        c,
        s_norm_sq: 0.0,
    };
    let s = chain.difference_matrix();
    chain.s_norm_sq = sym_eigendecomposition(&s.tr_mul(&s))?.values.max();
    Ok(chain)
}

impl PoweredChain {
    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn coupling(&self) -> f64 {
        self.c
    }

    fn difference_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                1.0
            } else if j + 1 == i {
                -self.c
            } else {
                0.0
            }
        })
    }

    fn diffs(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            if i == 0 {
                x[0]
            } else {
                x[i] - self.c * x[i - 1]
            }
        })
    }

    /// `Sᵀ v`.
    fn adjoint(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |j, _| {
            if j + 1 < self.n {
                v[j] - self.c * v[j + 1]
            } else {
                v[j]
            }
        })
    }

    fn d1(&self, t: f64) -> f64 {
        self.q * t.abs().powf(self.q - 1.0) * t.signum()
    }

    fn d2(&self, t: f64) -> f64 {
        if self.q == 2.0 {
            2.0
        } else {
            self.q * (self.q - 1.0) * t.abs().powf(self.q - 2.0)
        }
    }
}

impl SmoothOracle for PoweredChain {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.diffs(x).iter().map(|r| r.abs().powf(self.q)).sum()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.adjoint(&self.diffs(x).map(|r| self.d1(r)))
    }

    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        let r = self.diffs(x);
        let sh = self.diffs(h);
        self.adjoint(&DVector::from_fn(self.n, |i, _| self.d2(r[i]) * sh[i]))
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let w = self.diffs(x).map(|r| self.d2(r));
        let mut hess = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            hess[(j, j)] = w[j]
                + if j + 1 < self.n {
                    self.c * self.c * w[j + 1]
                } else {
                    0.0
                };
            if j + 1 < self.n {
                hess[(j, j + 1)] = -self.c * w[j + 1];
                hess[(j + 1, j)] = -self.c * w[j + 1];
            }
        }
        Some(hess)
    }

    /// Euclidean-norm constants. For `q = 3`,
    /// `‖∇²f(x) − ∇²f(y)‖ ≤ 6·‖S(x−y)‖_∞·‖S‖² ≤ 6√(1+c²)·‖S‖²·‖x − y‖`.
    fn lipschitz(&self, p: u32) -> Option<f64> {
        match (p, self.q) {
            (1, q) if q == 2.0 => Some(2.0 * self.s_norm_sq),
            (p, q) if q == 2.0 && p >= 2 => Some(0.0),
            (2, q) if q == 3.0 => Some(6.0 * (1.0 + self.c * self.c).sqrt() * self.s_norm_sq),
            _ => None,
        }
    }
}
