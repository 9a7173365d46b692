use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// First- and second-order access to the smooth convex part `f`.
///
/// Lipschitz constants are stated with respect to the norm of the problem
/// instance the oracle belongs to.
pub trait SmoothOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    fn value_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.value(x), self.gradient(x))
    }

    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64>;

    /// Dense Hessian, when the oracle can form it.
    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Known Lipschitz constant of the `p`-th derivative.
    fn lipschitz(&self, _p: u32) -> Option<f64> {
        None
    }
}

/// Exact call counters shared between an instrumented oracle and its owner.
#[derive(Debug, Default)]
pub struct OracleCounters {
    values: AtomicU64,
    gradients: AtomicU64,
    hessian_vecs: AtomicU64,
    hessians: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub values: u64,
    pub gradients: u64,
    pub hessian_vecs: u64,
    pub hessians: u64,
}

impl CallCounts {
    /// Hessian-vector products with each dense Hessian counted as `dim`
    /// products.
    pub fn hvp_equivalent(&self, dim: usize) -> u64 {
        self.hessian_vecs + self.hessians * dim as u64
    }
}

impl OracleCounters {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            values: self.values.load(Ordering::Relaxed),
            gradients: self.gradients.load(Ordering::Relaxed),
            hessian_vecs: self.hessian_vecs.load(Ordering::Relaxed),
            hessians: self.hessians.load(Ordering::Relaxed),
        }
    }
}

/// Wraps an oracle and counts every call that reaches it.
pub struct CountingOracle {
    inner: Arc<dyn SmoothOracle>,
    counters: Arc<OracleCounters>,
}

impl CountingOracle {
    pub fn new(inner: Arc<dyn SmoothOracle>) -> Self {
        CountingOracle {
            inner,
            counters: Arc::new(OracleCounters::default()),
        }
    }

    pub fn counters(&self) -> Arc<OracleCounters> {
        Arc::clone(&self.counters)
    }
}

impl SmoothOracle for CountingOracle {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.counters.values.fetch_add(1, Ordering::Relaxed);
        self.inner.value(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counters.gradients.fetch_add(1, Ordering::Relaxed);
        self.inner.gradient(x)
    }

    fn value_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self.counters.values.fetch_add(1, Ordering::Relaxed);
        self.counters.gradients.fetch_add(1, Ordering::Relaxed);
        self.inner.value_gradient(x)
    }

    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        self.counters.hessian_vecs.fetch_add(1, Ordering::Relaxed);
        self.inner.hessian_vec(x, h)
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let h = self.inner.hessian(x);
        if h.is_some() {
            self.counters.hessians.fetch_add(1, Ordering::Relaxed);
        }
        h
    }

    fn lipschitz(&self, p: u32) -> Option<f64> {
        self.inner.lipschitz(p)
    }
}

/// `f(x) = ½‖x‖₂²`, mostly useful in tests.
#[derive(Clone, Debug)]
pub struct HalfSquaredNorm {
    pub dim: usize,
}

impl SmoothOracle for HalfSquaredNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn hessian_vec(&self, _x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        h.clone()
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.dim, self.dim))
    }

    fn lipschitz(&self, p: u32) -> Option<f64> {
        match p {
            1 => Some(1.0),
            _ => Some(0.0),
        }
    }
}

/// Convex quadratic `f(x) = ½⟨Qx, x⟩ + ⟨c, x⟩`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl SmoothOracle for Quadratic {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.c
    }

    fn hessian_vec(&self, _x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        &self.q * h
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.q.clone())
    }

    fn lipschitz(&self, p: u32) -> Option<f64> {
        match p {
            1 => None,
            _ => Some(0.0),
        }
    }
}
