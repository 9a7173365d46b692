//! Accelerated scheme via contracting proximal iterations.
//!
//! Each outer step approximately minimizes
//! `h_{k+1}(x) = A_{k+1} f((a_{k+1}x + A_k x_k)/A_{k+1}) + a_{k+1}ψ(x) + β_d(v_k; x)`
//! with the monotone inexact tensor method, where
//! `d(x) = ‖x − x₀‖^{p+1}/(p+1)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::NormOperator;
use crate::methods::{
    status_from_error, HMode, Instrumented, MethodKind, RunStatus, SolverConfig, SolverRun,
    StepOutcome, Stepper, Tracer,
};
use crate::model::Order;
use crate::policies::AccuracyPolicy;
use crate::problems::{Composite, ProblemInstance, QuadraticTerm, SmoothOracle};
use crate::subsolvers::{residual_bound_from_norm, SubsolverKind};

/// Power prox-function `d(x) = ‖x − x₀‖^{p+1}/(p+1)`.
#[derive(Clone, Debug)]
pub struct PowerProx {
    pub anchor: DVector<f64>,
    pub order: Order,
}

impl PowerProx {
    fn power(&self) -> f64 {
        self.order.p_f64() + 1.0
    }

    pub fn value(&self, norm: &NormOperator, x: &DVector<f64>) -> f64 {
        norm.norm(&(x - &self.anchor)).powf(self.power()) / self.power()
    }

    /// `‖x − x₀‖^{p−1}·B(x − x₀)`.
    pub fn gradient(&self, norm: &NormOperator, x: &DVector<f64>) -> DVector<f64> {
        let r = x - &self.anchor;
        let br = norm.apply(&r);
        let len = r.dot(&br).max(0.0).sqrt();
        match self.order {
            Order::First => br,
            Order::Second => br * len,
        }
    }

    pub fn hessian_vec(
        &self,
        norm: &NormOperator,
        x: &DVector<f64>,
        h: &DVector<f64>,
    ) -> DVector<f64> {
        let bh = norm.apply(h);
        match self.order {
            Order::First => bh,
            Order::Second => {
                let r = x - &self.anchor;
                let br = norm.apply(&r);
                let len = r.dot(&br).max(0.0).sqrt();
                if len == 0.0 {
                    DVector::zeros(h.len())
                } else {
                    bh * len + &br * (br.dot(h) / len)
                }
            }
        }
    }
}

/// `β_d(v; x) = d(x) − d(v) − ⟨∇d(v), x − v⟩`.
pub fn bregman(prox: &PowerProx, norm: &NormOperator, v: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let value = prox.value(norm, x) - prox.value(norm, v) - prox.gradient(norm, v).dot(&(x - v));
    value.max(0.0)
}

/// State of the outer recursion.
#[derive(Clone, Debug)]
pub struct ProxState {
    pub k: usize,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub a_sum: f64,
    pub anchor: DVector<f64>,
}

impl ProxState {
    pub fn new(x0: DVector<f64>) -> Self {
        ProxState {
            k: 0,
            x: x0.clone(),
            v: x0.clone(),
            a_sum: 0.0,
            anchor: x0,
        }
    }

    /// `A_{k+1} = (k+1)^{p+1}/L_p`.
    pub fn next_a_sum(&self, order: Order, lp: f64) -> f64 {
        (self.k as f64 + 1.0).powi(order.p() as i32 + 1) / lp
    }

    /// Moves to `k + 1` given `v_{k+1}`:
    /// `x_{k+1} = (a_{k+1}v_{k+1} + A_k x_k)/A_{k+1}`.
    pub fn advance(&mut self, v_next: DVector<f64>, a_next_sum: f64) {
        let a = a_next_sum - self.a_sum;
        self.x = (&v_next * a + &self.x * self.a_sum) / a_next_sum;
        self.v = v_next;
        self.a_sum = a_next_sum;
        self.k += 1;
    }
}

/// `x ↦ A_{k+1} f((a_{k+1}x + A_k x_k)/A_{k+1})`.
pub struct ContractedOracle {
    base: Arc<dyn SmoothOracle>,
    big_a: f64,
    small_a: f64,
    shift: DVector<f64>,
}

impl ContractedOracle {
    fn point(&self, x: &DVector<f64>) -> DVector<f64> {
        x * (self.small_a / self.big_a) + &self.shift
    }

    /// `a_{k+1}/A_{k+1}`.
    pub fn contraction(&self) -> f64 {
        self.small_a / self.big_a
    }
}

impl SmoothOracle for ContractedOracle {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.big_a * self.base.value(&self.point(x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.base.gradient(&self.point(x)) * self.small_a
    }

    fn value_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = self.base.value_gradient(&self.point(x));
        (self.big_a * v, g * self.small_a)
    }

    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        self.base.hessian_vec(&self.point(x), h) * (self.small_a * self.small_a / self.big_a)
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.base
            .hessian(&self.point(x))
            .map(|m| m * (self.small_a * self.small_a / self.big_a))
    }

    /// `a^{p+1}/A^p · L_p(f)`.
    fn lipschitz(&self, p: u32) -> Option<f64> {
        self.base
            .lipschitz(p)
            .map(|l| self.small_a.powi(p as i32 + 1) / self.big_a.powi(p as i32) * l)
    }
}

/// `a_{k+1}ψ(x) + β_d(v_k; x)`.
#[derive(Debug)]
pub struct ProxComposite {
    psi: Arc<dyn Composite>,
    weight: f64,
    prox: PowerProx,
    center: DVector<f64>,
    center_grad: DVector<f64>,
}

impl Composite for ProxComposite {
    fn value(&self, norm: &NormOperator, x: &DVector<f64>) -> f64 {
        let breg = self.prox.value(norm, x)
            - self.prox.value(norm, &self.center)
            - self.center_grad.dot(&(x - &self.center));
        self.weight * self.psi.value(norm, x) + breg
    }

    fn gradient(&self, norm: &NormOperator, x: &DVector<f64>) -> DVector<f64> {
        self.psi.gradient(norm, x) * self.weight + self.prox.gradient(norm, x) - &self.center_grad
    }

    fn hessian_vec(&self, norm: &NormOperator, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        self.psi.hessian_vec(norm, x, h) * self.weight + self.prox.hessian_vec(norm, x, h)
    }

    fn as_quadratic(&self, dim: usize) -> Option<QuadraticTerm> {
        if self.prox.order != Order::First {
            return None;
        }
        // β_d(v; x) = ½‖x − v‖² for p = 1.
        let psi = self.psi.as_quadratic(dim)?;
        let mu_psi = self.weight * psi.mu;
        let mu = mu_psi + 1.0;
        Some(QuadraticTerm {
            mu,
            center: (psi.center * mu_psi + &self.center) / mu,
        })
    }

    fn uniform_convexity(&self, degree: u32) -> f64 {
        let own = if degree == self.prox.order.p() + 1 {
            2f64.powi(1 - self.prox.order.p() as i32)
        } else {
            0.0
        };
        own + self.weight * self.psi.uniform_convexity(degree)
    }
}

/// `h_{k+1}` as a problem instance, started at `v_k`.
pub struct ContractedSubproblem {
    pub instance: ProblemInstance,
    pub order: Order,
    pub a_sum_next: f64,
    pub a_next: f64,
    /// Uniform convexity modulus of degree `p+1`.
    pub sigma: f64,
}

impl ContractedSubproblem {
    /// `L_p(g_{k+1})`.
    pub fn contracted_lipschitz(&self) -> Option<f64> {
        self.instance.lipschitz(self.order.p())
    }
}

pub fn build_subproblem(
    state: &ProxState,
    base: &ProblemInstance,
    order: Order,
    lp: f64,
) -> Result<ContractedSubproblem> {
    check_dim(base.dim(), state.x.len())?;
    let a_sum_next = state.next_a_sum(order, lp);
    if !(a_sum_next > state.a_sum) {
        return Err(Error::contract("A_{k+1} must exceed A_k"));
    }
    let a_next = a_sum_next - state.a_sum;
    let smooth = ContractedOracle {
        base: Arc::clone(&base.smooth),
        big_a: a_sum_next,
        small_a: a_next,
        shift: &state.x * (state.a_sum / a_sum_next),
    };
    let prox = PowerProx {
        anchor: state.anchor.clone(),
        order,
    };
    let center_grad = prox.gradient(&base.norm, &state.v);
    let composite = ProxComposite {
        psi: Arc::clone(&base.composite),
        weight: a_next,
        prox,
        center: state.v.clone(),
        center_grad,
    };
    let sigma = composite.uniform_convexity(order.p() + 1);
    let instance = ProblemInstance::new(
        format!("{}[contracted k={}]", base.name, state.k),
        Arc::new(smooth),
        Arc::new(composite),
        (*base.norm).clone(),
        state.v.clone(),
    )?;
    Ok(ContractedSubproblem {
        instance,
        order,
        a_sum_next,
        a_next,
        sigma,
    })
}

/// Uniform-convexity bound on `h_{k+1}(y) − min h_{k+1}` with `q = p+1`.
pub fn subproblem_residual_certificate(
    sub: &ContractedSubproblem,
    y: &DVector<f64>,
) -> Result<f64> {
    let g = sub.instance.gradient(y);
    residual_bound_from_norm(sub.instance.norm.dual(&g), sub.sigma, sub.order.p() + 1)
}

fn certificate_from_gradient(sub: &ContractedSubproblem, grad: &DVector<f64>) -> Result<f64> {
    residual_bound_from_norm(sub.instance.norm.dual(grad), sub.sigma, sub.order.p() + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelConfig {
    /// Outer accuracy `ζ_k`; defaults to `power(1, p+2)`.
    #[serde(default)]
    pub zeta: Option<AccuracyPolicy>,
    /// Inner accuracy `δ_j`, indexed by the inner step counter.
    #[serde(default = "default_inner_policy")]
    pub inner: AccuracyPolicy,
    #[serde(default = "default_inner_cap")]
    pub max_inner_steps: usize,
}

fn default_inner_policy() -> AccuracyPolicy {
    AccuracyPolicy::Power { c: 1.0, alpha: 1.0 }
}

fn default_inner_cap() -> usize {
    1000
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            zeta: None,
            inner: default_inner_policy(),
            max_inner_steps: default_inner_cap(),
        }
    }
}

impl AccelConfig {
    pub fn zeta_policy(&self, order: Order) -> AccuracyPolicy {
        self.zeta.unwrap_or(AccuracyPolicy::Power {
            c: 1.0,
            alpha: order.p_f64() + 2.0,
        })
    }
}

struct InnerResult {
    v: DVector<f64>,
    steps: usize,
    certificate: f64,
    h_used: Option<f64>,
    floor_hit: bool,
}

fn inner_solve(
    sub: &ContractedSubproblem,
    outer: &mut Instrumented,
    config: &SolverConfig,
    accel: &AccelConfig,
    zeta: f64,
    lp: f64,
) -> Result<InnerResult> {
    // H = p·L_p(g_{k+1}) with L_p(g_{k+1}) = a^{p+1}/A^p·L_p from the outer schedule.
    let p = sub.order.p() as i32;
    let contracted_lp = sub.a_next.powi(p + 1) / sub.a_sum_next.powi(p) * lp;
    let inner_config = SolverConfig {
        h_mode: HMode::Fixed {
            h: p as f64 * contracted_lp,
        },
        policy: accel.inner,
        target_gap: None,
        gradient_tolerance: None,
        f_star: None,
        monotone_floor: None,
        record_wall_time: false,
        ..config.clone()
    };
    let mut inst = Instrumented::new(&sub.instance, false);
    let mut y = sub.instance.x0.clone();
    let (mut fs, mut gs) = inst.problem.smooth.value_gradient(&y);
    let mut f = fs + inst.problem.composite.value(&inst.problem.norm, &y);
    let mut stepper = Stepper::new(&sub.instance, &inner_config, f)?;
    let mut prev: Option<f64> = None;
    let mut last: Option<StepOutcome> = None;
    let mut certificate = f64::INFINITY;
    let mut floor_hit = false;
    let mut steps = 0;

    let result = loop {
        if steps >= accel.max_inner_steps {
            break Err(Error::SubsolverStall {
                best: y.clone(),
                residual: certificate,
                iterations: steps,
            });
        }
        steps += 1;
        let delta = accel.inner.next_delta(steps, prev.map(|p| (p, f)))?;
        let out = match stepper.step(&mut inst, &y, f, fs, &gs, delta, None, true) {
            Ok(o) => o,
            Err(e) => break Err(e),
        };
        if out.decreased {
            prev = Some(f);
            y = out.point.clone();
            let (a, b) = inst.problem.smooth.value_gradient(&y);
            fs = a;
            gs = b;
            f = out.objective;
        } else {
            floor_hit = true;
        }
        let full = &gs + inst.problem.composite.gradient(&inst.problem.norm, &y);
        certificate = certificate_from_gradient(sub, &full)?;
        last = Some(out);
        if certificate <= zeta || floor_hit {
            break Ok(());
        }
    };
    outer.dense_products += inst.dense_products;
    result?;
    Ok(InnerResult {
        v: y,
        steps,
        certificate,
        h_used: last.map(|o| o.h_used),
        floor_hit,
    })
}

/// Contracting proximal scheme with `A_k = k^{p+1}/L_p`. The `H` mode of
/// `config` fixes `L_p`: the problem's constant, or `h/p` for a fixed `H`.
pub fn accelerated_method(
    problem: &ProblemInstance,
    config: &SolverConfig,
    accel: &AccelConfig,
) -> Result<SolverRun> {
    let p = config.order.p();
    let lp = match config.h_mode {
        HMode::FromLipschitz => problem
            .lipschitz(p)
            .ok_or_else(|| Error::Config(format!("L_{p} unknown for {}", problem.name)))?,
        HMode::Fixed { h } => h / p as f64,
        HMode::LineSearch { .. } => {
            return Err(Error::Config(
                "the accelerated scheme runs with a fixed H schedule".into(),
            ))
        }
    };
    if !(lp > 0.0) {
        return Err(Error::Config(format!(
            "accelerated scheme needs L_p > 0, got {lp}"
        )));
    }
    if config.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be positive".into()));
    }
    if config.order == Order::Second && config.subsolver == SubsolverKind::Exact {
        return Err(Error::Config(
            "the p = 2 accelerated scheme needs subsolver fgm: its prox term is not quadratic"
                .into(),
        ));
    }
    let zeta_policy = accel.zeta_policy(config.order).validated()?;
    accel.inner.validated()?;
    if zeta_policy.needs_history() {
        return Err(Error::Config(
            "the outer accuracy must be a constant or power schedule".into(),
        ));
    }

    let mut inst = Instrumented::new(problem, config.record_wall_time);
    let mut tracer = Tracer::new(problem, config);
    let mut state = ProxState::new(problem.x0.clone());
    let f0 = inst.problem.value(&state.x);
    let g0 = inst.problem.norm.dual(&inst.problem.gradient(&state.x));
    tracer.push(&inst, 0, &state.x, f0, g0, None, None, true);
    let mut status = RunStatus::MaxIterations;

    for k in 0..config.max_iterations {
        if tracer.target_met(config) {
            status = RunStatus::TargetReached;
            break;
        }
        if inst.over_budget(config.max_wall_time_s) {
            status = RunStatus::TimeBudget;
            break;
        }
        let sub = build_subproblem(&state, &inst.problem, config.order, lp)?;
        let zeta = zeta_policy.next_delta(k + 1, None)?;
        let inner = match inner_solve(&sub, &mut inst, config, accel, zeta, lp) {
            Ok(r) => r,
            Err(e) => {
                status = status_from_error(e)?;
                break;
            }
        };
        if inner.floor_hit && inner.certificate > zeta {
            log::debug!(
                "outer step {}: inner floor reached with certificate {:e} > {:e}",
                k + 1,
                inner.certificate,
                zeta
            );
        }
        state.advance(inner.v, sub.a_sum_next);
        let f = inst.problem.value(&state.x);
        let gn = inst.problem.norm.dual(&inst.problem.gradient(&state.x));
        let summary = StepOutcome {
            point: state.x.clone(),
            objective: f,
            certified: inner.certificate,
            inner_iterations: inner.steps,
            h_used: inner.h_used.unwrap_or(f64::NAN),
            delta_used: zeta,
            decreased: true,
        };
        tracer.push(
            &inst,
            k + 1,
            &state.x,
            f,
            gn,
            Some(&summary),
            Some(zeta),
            true,
        );
    }
    if status == RunStatus::MaxIterations && tracer.target_met(config) {
        status = RunStatus::TargetReached;
    }
    Ok(SolverRun {
        method: MethodKind::Accelerated,
        problem: problem.name.clone(),
        records: tracer.records,
        status,
        x_final: state.x,
        f_star: tracer.f_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{powered_chain_instance, shifted_logsumexp_instance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bregman_examples() {
        let norm = NormOperator::identity(3);
        let prox = PowerProx {
            anchor: DVector::from_vec(vec![1.0, 0.0, -1.0]),
            order: Order::Second,
        };
        let v = DVector::from_vec(vec![0.3, 0.2, 0.1]);
        assert_eq!(bregman(&prox, &norm, &v, &v), 0.0);
        let x = DVector::from_vec(vec![2.0, 1.0, 0.0]);
        let at_anchor = bregman(&prox, &norm, &prox.anchor, &x);
        assert!((at_anchor - prox.value(&norm, &x)).abs() < 1e-15);
    }

    #[test]
    fn bregman_lower_bound_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let norm = NormOperator::identity(4);
        let prox = PowerProx {
            anchor: DVector::zeros(4),
            order: Order::Second,
        };
        for _ in 0..500 {
            let v: DVector<f64> = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let x: DVector<f64> = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let diff: DVector<f64> = &x - &v;
            let lower = diff.norm().powi(3) / 6.0;
            assert!(bregman(&prox, &norm, &v, &x) >= lower - 1e-12);
        }
    }

    #[test]
    fn first_step_is_not_contracted() {
        let prob = shifted_logsumexp_instance(4, 20, 1.0, 0).unwrap();
        let lp = prob.lipschitz(2).unwrap();
        let state = ProxState::new(prob.x0.clone());
        let sub = build_subproblem(&state, &prob, Order::Second, lp).unwrap();
        assert!((sub.a_next - 1.0 / lp).abs() < 1e-15);
        assert_eq!(sub.a_sum_next, sub.a_next);
        let mut s = state.clone();
        let v = DVector::from_element(4, 0.25);
        s.advance(v.clone(), sub.a_sum_next);
        assert_eq!(s.x, v);
    }

    #[test]
    fn contracted_constant_stays_bounded() {
        let prob = powered_chain_instance(5, 3.0, 1.0).unwrap();
        let lp = prob.lipschitz(2).unwrap();
        let mut state = ProxState::new(prob.x0.clone());
        for _ in 0..30 {
            let sub = build_subproblem(&state, &prob, Order::Second, lp).unwrap();
            assert!(sub.contracted_lipschitz().unwrap() <= 27.0 + 1e-9);
            let v = state.v.clone();
            state.advance(v, sub.a_sum_next);
        }
    }

    #[test]
    fn certificate_constant() {
        let prob = shifted_logsumexp_instance(3, 12, 1.0, 1).unwrap();
        let state = ProxState::new(prob.x0.clone());
        let sub =
            build_subproblem(&state, &prob, Order::Second, prob.lipschitz(2).unwrap()).unwrap();
        assert_eq!(sub.sigma, 0.5);
        let y = DVector::from_element(3, 0.4);
        let s = sub.instance.norm.dual(&sub.instance.gradient(&y));
        let want = (2.0 / 3.0) * 2f64.sqrt() * s.powf(1.5);
        assert!((subproblem_residual_certificate(&sub, &y).unwrap() - want).abs() <= 1e-12 * want);
    }
}
