//! Regularized Taylor model
//! `Ω_H(x; y) = f_{p,x}(y) + H‖y − x‖^{p+1}/(p+1)! + ψ(y)` for `p ∈ {1, 2}`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::NormOperator;
use crate::problems::{Composite, ProblemInstance, SmoothOracle};

/// Order `p` of the method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn p(self) -> u32 {
        match self {
            Order::First => 1,
            Order::Second => 2,
        }
    }

    pub fn p_f64(self) -> f64 {
        self.p() as f64
    }

    /// `p!`
    pub fn factorial(self) -> f64 {
        match self {
            Order::First => 1.0,
            Order::Second => 2.0,
        }
    }

    /// `(p+1)!`
    pub fn next_factorial(self) -> f64 {
        match self {
            Order::First => 2.0,
            Order::Second => 6.0,
        }
    }
}

impl TryFrom<u32> for Order {
    type Error = Error;

    fn try_from(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            other => Err(Error::Config(format!(
                "order p must be 1 or 2, got {other}"
            ))),
        }
    }
}

impl From<Order> for u32 {
    fn from(o: Order) -> u32 {
        o.p()
    }
}

/// How a second-order model applies `∇²f(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurvatureMode {
    /// Form and keep the dense Hessian (needed by the spectral subsolver).
    Dense,
    /// Call the oracle's Hessian-vector product on demand.
    Operator,
}

enum Curvature {
    None,
    Dense(DMatrix<f64>),
    Operator(Arc<dyn SmoothOracle>),
}

/// `Ω_H(x; ·)` frozen at a center `x`.
pub struct TensorModel {
    order: Order,
    center: DVector<f64>,
    h: f64,
    f_center: f64,
    grad: DVector<f64>,
    curvature: Curvature,
    composite: Arc<dyn Composite>,
    norm: Arc<NormOperator>,
    dense_products: AtomicU64,
}

impl TensorModel {
    pub fn new(
        problem: &ProblemInstance,
        center: &DVector<f64>,
        order: Order,
        h: f64,
        mode: CurvatureMode,
    ) -> Result<Self> {
        let (f_center, grad) = problem.smooth.value_gradient(center);
        Self::with_center_data(problem, center, f_center, grad, order, h, mode)
    }

    /// Builds the model from an already evaluated `f(x)` and `∇f(x)`.
    pub fn with_center_data(
        problem: &ProblemInstance,
        center: &DVector<f64>,
        f_center: f64,
        grad: DVector<f64>,
        order: Order,
        h: f64,
        mode: CurvatureMode,
    ) -> Result<Self> {
        check_dim(problem.dim(), center.len())?;
        if !(h >= 0.0 && h.is_finite()) {
            return Err(Error::contract(format!(
                "model needs finite H >= 0, got {h}"
            )));
        }
        let curvature = match (order, mode) {
            (Order::First, _) => Curvature::None,
            (Order::Second, CurvatureMode::Dense) => {
                Curvature::Dense(problem.smooth.hessian(center).ok_or_else(|| {
                    Error::contract("dense curvature requested but the oracle has no Hessian")
                })?)
            }
            (Order::Second, CurvatureMode::Operator) => {
                Curvature::Operator(Arc::clone(&problem.smooth))
            }
        };
        Ok(TensorModel {
            order,
            center: center.clone(),
            h,
            f_center,
            grad,
            curvature,
            composite: Arc::clone(&problem.composite),
            norm: Arc::clone(&problem.norm),
            dense_products: AtomicU64::new(0),
        })
    }

    /// Same center and cached derivatives with another regularization
    /// constant. No oracle calls.
    pub fn with_h(&self, h: f64) -> Result<Self> {
        if !(h >= 0.0 && h.is_finite()) {
            return Err(Error::contract(format!(
                "model needs finite H >= 0, got {h}"
            )));
        }
        let curvature = match &self.curvature {
            Curvature::None => Curvature::None,
            Curvature::Dense(m) => Curvature::Dense(m.clone()),
            Curvature::Operator(o) => Curvature::Operator(Arc::clone(o)),
        };
        Ok(TensorModel {
            order: self.order,
            center: self.center.clone(),
            h,
            f_center: self.f_center,
            grad: self.grad.clone(),
            curvature,
            composite: Arc::clone(&self.composite),
            norm: Arc::clone(&self.norm),
            dense_products: AtomicU64::new(0),
        })
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn norm(&self) -> &NormOperator {
        &self.norm
    }

    pub fn composite(&self) -> &dyn Composite {
        self.composite.as_ref()
    }

    pub fn smooth_value_at_center(&self) -> f64 {
        self.f_center
    }

    pub fn smooth_gradient_at_center(&self) -> &DVector<f64> {
        &self.grad
    }

    pub fn dense_hessian(&self) -> Option<&DMatrix<f64>> {
        match &self.curvature {
            Curvature::Dense(m) => Some(m),
            _ => None,
        }
    }

    /// Products with a stored dense Hessian. Products taken through the
    /// oracle are counted by the oracle itself.
    pub fn dense_products(&self) -> u64 {
        self.dense_products.load(Ordering::Relaxed)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `∇²f(x)·d`, zero for first-order models.
    pub fn curvature_times(&self, d: &DVector<f64>) -> DVector<f64> {
        match &self.curvature {
            Curvature::None => DVector::zeros(d.len()),
            Curvature::Dense(m) => {
                self.dense_products.fetch_add(1, Ordering::Relaxed);
                m * d
            }
            Curvature::Operator(oracle) => oracle.hessian_vec(&self.center, d),
        }
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.value_gradient(y).0
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        self.value_gradient(y).1
    }

    /// Value and gradient at `y` sharing one curvature product.
    pub fn value_gradient(&self, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = y - &self.center;
        let bd = self.norm.apply(&d);
        let r = d.dot(&bd).max(0.0).sqrt();
        let p = self.order.p_f64();

        let mut value = self.f_center + self.grad.dot(&d);
        let mut grad = self.grad.clone();
        if self.order == Order::Second {
            let ad = self.curvature_times(&d);
            value += 0.5 * ad.dot(&d);
            grad += ad;
        }
        value += self.h * r.powf(p + 1.0) / self.order.next_factorial();
        if r > 0.0 {
            grad += bd * (self.h / self.order.factorial() * r.powf(p - 1.0));
        }
        value += self.composite.value(&self.norm, y);
        grad += self.composite.gradient(&self.norm, y);
        (value, grad)
    }

    /// Pairs `(q, σ)` with `σ > 0` such that the model is uniformly convex
    /// of degree `q` with parameter `σ`, assuming `∇²f(x) ⪰ 0`.
    ///
    /// The regularizer `H‖·‖^{p+1}/(p+1)!` contributes `σ = H/4` for `p = 2`
    /// and `σ = H` for `p = 1`. A strongly convex `ψ` adds a degree-2 entry.
    pub fn convexity_moduli(&self) -> Vec<(u32, f64)> {
        let top = self.order.p() + 1;
        let from_reg = match self.order {
            Order::First => self.h,
            Order::Second => self.h / 4.0,
        };
        let mut out = vec![(top, from_reg + self.composite.uniform_convexity(top))];
        if top != 2 {
            out.push((2, self.composite.uniform_convexity(2)));
        }
        out.retain(|&(_, s)| s > 0.0);
        out
    }
}

/// Outcome of sampling `F(y) ≤ Ω_H(x; y)` and the two-sided Taylor bound.
#[derive(Clone, Debug, Serialize)]
pub struct UpperBoundReport {
    pub samples: usize,
    pub upper_bound_violations: usize,
    /// Largest `F(y) − Ω_H(x; y)` seen (negative when the bound holds with room).
    pub max_excess: f64,
    pub taylor_violations: usize,
    /// Largest `|f(y) − f_{p,x}(y)| / (L_p‖y−x‖^{p+1}/(p+1)!)`.
    pub max_taylor_ratio: f64,
}

impl UpperBoundReport {
    pub fn passed(&self) -> bool {
        self.upper_bound_violations == 0 && self.taylor_violations == 0
    }
}

pub const UPPER_BOUND_TOL: f64 = 1e-10;

/// Samples `y` uniformly in the `‖·‖`-ball of the given radius around the
/// model center.
pub fn model_upper_bound_check(
    model: &TensorModel,
    problem: &ProblemInstance,
    samples: usize,
    radius: f64,
    seed: u64,
) -> Result<UpperBoundReport> {
    let p = model.order().p();
    let lp = problem
        .lipschitz(p)
        .ok_or_else(|| Error::contract(format!("L_{p} is not known for {}", problem.name)))?;
    if model.h() < lp {
        return Err(Error::contract(format!(
            "model H = {} is below L_{p} = {lp}",
            model.h()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.dim();
    let mut report = UpperBoundReport {
        samples,
        upper_bound_violations: 0,
        max_excess: f64::NEG_INFINITY,
        taylor_violations: 0,
        max_taylor_ratio: 0.0,
    };
    for _ in 0..samples {
        let dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
        let len = model.norm().norm(&dir);
        if len == 0.0 {
            continue;
        }
        let t: f64 = radius * rng.gen::<f64>().powf(1.0 / n as f64);
        let d = dir * (t / len);
        let y = model.center() + &d;
        let f_y = problem.smooth.value(&y);
        let big_f = f_y + problem.composite.value(&problem.norm, &y);
        let omega = model.value(&y);
        let excess = big_f - omega;
        report.max_excess = report.max_excess.max(excess);
        if excess > UPPER_BOUND_TOL {
            report.upper_bound_violations += 1;
        }

        let mut taylor = model.smooth_value_at_center() + model.smooth_gradient_at_center().dot(&d);
        if model.order() == Order::Second {
            taylor += 0.5 * model.curvature_times(&d).dot(&d);
        }
        let r = model.norm().norm(&d);
        let allowance = lp * r.powi(p as i32 + 1) / model.order().next_factorial();
        let gap = (f_y - taylor).abs();
        if allowance > 0.0 {
            report.max_taylor_ratio = report.max_taylor_ratio.max(gap / allowance);
        }
        if gap > allowance + UPPER_BOUND_TOL {
            report.taylor_violations += 1;
        }
    }
    Ok(report)
}
