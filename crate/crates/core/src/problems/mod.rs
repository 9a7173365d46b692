//! Problem oracles for `F = f + ψ`, synthetic generators, known constants and
//! LIBSVM ingestion.

mod chain;
mod composite;
mod dataset;
mod derivatives;
mod logistic;
mod logsumexp;
mod oracle;

use std::sync::Arc;

use nalgebra::DVector;

pub use chain::{powered_chain_oracle, PoweredChain};
pub use composite::{Composite, CompositePart, QuadraticTerm};
pub use dataset::{parse_libsvm, parse_libsvm_str, synthetic_classification, Dataset, SparseRows};
pub use derivatives::{
    check_derivatives, check_derivatives_scaled, fd_step, gradient_error, hessian_vec_error,
    DerivativeReport, DERIVATIVE_TOLERANCE,
};
pub use logistic::{logistic_oracle, LogisticOracle};
pub use logsumexp::{generate_shifted_logsumexp, logsumexp_oracle, LogSumExp, ShiftedLogSumExp};
pub use oracle::{
    CallCounts, CountingOracle, HalfSquaredNorm, OracleCounters, Quadratic, SmoothOracle,
};

use crate::error::{check_dim, Error, Result};
use crate::linalg::NormOperator;

/// Tolerance on `‖∇F(x*)‖_*` for a declared optimum.
pub const OPTIMUM_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct KnownOptimum {
    pub x: DVector<f64>,
    pub value: f64,
}

/// A composite problem `min F(x) = f(x) + ψ(x)` together with its geometry
/// and a default starting point.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub smooth: Arc<dyn SmoothOracle>,
    pub composite: Arc<dyn Composite>,
    pub norm: Arc<NormOperator>,
    pub known_optimum: Option<KnownOptimum>,
    pub x0: DVector<f64>,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("composite", &self.composite)
            .field(
                "known_optimum",
                &self.known_optimum.as_ref().map(|o| o.value),
            )
            .finish()
    }
}

impl ProblemInstance {
    pub fn new(
        name: impl Into<String>,
        smooth: Arc<dyn SmoothOracle>,
        composite: Arc<dyn Composite>,
        norm: NormOperator,
        x0: DVector<f64>,
    ) -> Result<Self> {
        check_dim(smooth.dim(), norm.dim())?;
        check_dim(smooth.dim(), x0.len())?;
        Ok(ProblemInstance {
            name: name.into(),
            smooth,
            composite,
            norm: Arc::new(norm),
            known_optimum: None,
            x0,
        })
    }

    /// Declares `x*`; rejected unless `‖∇F(x*)‖_* ≤ 1e-8`.
    pub fn with_optimum(mut self, x: DVector<f64>) -> Result<Self> {
        check_dim(self.dim(), x.len())?;
        let residual = self.norm.dual(&self.gradient(&x));
        if !(residual <= OPTIMUM_RESIDUAL_TOL) {
            return Err(Error::contract(format!(
                "declared optimum has gradient residual {residual:e}"
            )));
        }
        let value = self.value(&x);
        self.known_optimum = Some(KnownOptimum { x, value });
        Ok(self)
    }

    /// Replaces `ψ`, keeping the known optimum only if it stays stationary.
    pub fn with_composite(mut self, composite: Arc<dyn Composite>) -> Self {
        self.composite = composite;
        if let Some(opt) = self.known_optimum.take() {
            if let Ok(updated) = self.clone().with_optimum(opt.x) {
                return updated;
            }
        }
        self
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Result<Self> {
        check_dim(self.dim(), x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    /// Same problem with every smooth-oracle call counted.
    pub fn instrumented(&self) -> (ProblemInstance, Arc<OracleCounters>) {
        let counting = CountingOracle::new(Arc::clone(&self.smooth));
        let counters = counting.counters();
        let mut inst = self.clone();
        inst.smooth = Arc::new(counting);
        (inst, counters)
    }

    pub fn dim(&self) -> usize {
        self.smooth.dim()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.smooth.value(x) + self.composite.value(&self.norm, x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.smooth.gradient(x) + self.composite.gradient(&self.norm, x)
    }

    pub fn lipschitz(&self, p: u32) -> Option<f64> {
        self.smooth.lipschitz(p)
    }

    pub fn optimal_value(&self) -> Option<f64> {
        self.known_optimum.as_ref().map(|o| o.value)
    }

    pub fn distance_to_optimum(&self, x: &DVector<f64>) -> Option<f64> {
        self.known_optimum
            .as_ref()
            .map(|o| self.norm.norm(&(x - &o.x)))
    }
}

/// Shifted log-sum-exp with `x* = 0` and the Gram norm. Starts from the
/// all-ones point unless overridden.
pub fn shifted_logsumexp_instance(
    n: usize,
    m: usize,
    mu: f64,
    seed: u64,
) -> Result<ProblemInstance> {
    let data = generate_shifted_logsumexp(n, m, mu, seed)?;
    ProblemInstance::new(
        format!("logsumexp(n={n},m={m},mu={mu},seed={seed})"),
        Arc::new(data.oracle),
        Arc::new(CompositePart::Zero),
        data.norm,
        DVector::from_element(n, 1.0),
    )?
    .with_optimum(DVector::zeros(n))
}

/// Powered chain with `x* = 0`, starting from the all-ones point, in the
/// standard Euclidean norm.
pub fn powered_chain_instance(n: usize, q: f64, c: f64) -> Result<ProblemInstance> {
    let oracle = powered_chain_oracle(n, q, c)?;
    ProblemInstance::new(
        format!("chain(n={n},q={q},c={c})"),
        Arc::new(oracle),
        Arc::new(CompositePart::Zero),
        NormOperator::identity(n),
        DVector::from_element(n, 1.0),
    )?
    .with_optimum(DVector::zeros(n))
}

/// ℓ2-logistic regression in the Euclidean norm, started at the origin.
pub fn logistic_instance(data: Dataset, l2: f64) -> Result<ProblemInstance> {
    let name = format!("logistic({},l2={l2})", data.source);
    let n = data.n();
    let oracle = logistic_oracle(data, l2)?;
    ProblemInstance::new(
        name,
        Arc::new(oracle),
        Arc::new(CompositePart::Zero),
        NormOperator::identity(n),
        DVector::zeros(n),
    )
}
