//! Inexact δ-steps for the regularized model: a spectral cubic solver, an
//! accelerated gradient loop with certificates, the closed-form first-order
//! step, and the monotone refinement wrapper.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigendecomposition;
use crate::model::{Order, TensorModel};
use crate::problems::ProblemInstance;

/// How a step's residual `Ω_H(x;T) − min Ω_H(x;·)` was bounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certification {
    /// Uniform-convexity bound on the gradient norm.
    Bound,
    /// Compared against a computed exact minimizer of the model.
    ExactOracle,
    ClosedForm,
}

/// Stopping rule for the first-order subsolver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Bound,
    Exact,
}

/// Which subsolver computes the step. Serialized as `"exact"`,
/// `"fgm:bound"` or `"fgm:exact"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SubsolverKind {
    /// Spectral solve (p = 2) or closed-form gradient step (p = 1).
    Exact,
    Fgm {
        stop: StopRule,
    },
}

impl std::fmt::Display for SubsolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubsolverKind::Exact => write!(f, "exact"),
            SubsolverKind::Fgm {
                stop: StopRule::Bound,
            } => write!(f, "fgm:bound"),
            SubsolverKind::Fgm {
                stop: StopRule::Exact,
            } => write!(f, "fgm:exact"),
        }
    }
}

impl std::str::FromStr for SubsolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "exact" => Ok(SubsolverKind::Exact),
            "fgm" | "fgm:bound" => Ok(SubsolverKind::Fgm {
                stop: StopRule::Bound,
            }),
            "fgm:exact" => Ok(SubsolverKind::Fgm {
                stop: StopRule::Exact,
            }),
            other => Err(Error::Config(format!(
                "unknown subsolver '{other}' (exact, fgm:bound, fgm:exact)"
            ))),
        }
    }
}

impl TryFrom<String> for SubsolverKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SubsolverKind> for String {
    fn from(k: SubsolverKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub point: DVector<f64>,
    pub model_value: f64,
    pub certified_residual: f64,
    pub inner_iterations: usize,
    pub certification: Certification,
    /// Best model value after the start point and after each inner iteration.
    pub best_values: Vec<f64>,
}

/// `((q−1)/q)·σ^{−1/(q−1)}·s^{q/(q−1)}`, which bounds `g(y) − min g` for
/// `g` uniformly convex of degree `q` with parameter `σ` and `s = ‖∇g(y)‖_*`.
pub fn residual_bound_from_norm(grad_dual_norm: f64, sigma: f64, q: u32) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!(
            "residual bound needs sigma > 0, got {sigma}"
        )));
    }
    if q < 2 {
        return Err(Error::contract(format!(
            "residual bound needs degree q >= 2, got {q}"
        )));
    }
    let q = q as f64;
    Ok((q - 1.0) / q * sigma.powf(-1.0 / (q - 1.0)) * grad_dual_norm.powf(q / (q - 1.0)))
}

/// [`residual_bound_from_norm`] at `y` for the model `M`.
pub fn residual_bound(model: &TensorModel, y: &DVector<f64>, sigma: f64, q: u32) -> Result<f64> {
    let g = model.gradient(y);
    residual_bound_from_norm(model.norm().dual(&g), sigma, q)
}

/// Tightest bound over every convexity modulus the model has; `+∞` if the
/// model has none.
pub fn model_certificate(model: &TensorModel, grad_dual_norm: f64) -> f64 {
    model
        .convexity_moduli()
        .into_iter()
        .filter_map(|(q, s)| residual_bound_from_norm(grad_dual_norm, s, q).ok())
        .fold(f64::INFINITY, f64::min)
}

const SECULAR_RTOL: f64 = 1e-12;

/// Global minimizer of the second-order model when `ψ` is zero or
/// quadratic, by a spectral decomposition and a scalar secular equation.
pub fn exact_cubic_step(model: &TensorModel) -> Result<StepResult> {
    if model.order() != Order::Second {
        return Err(Error::contract(
            "exact_cubic_step needs a second-order model",
        ));
    }
    let hess = model
        .dense_hessian()
        .ok_or_else(|| Error::contract("exact_cubic_step needs a dense Hessian"))?;
    let n = model.dim();
    let quad = model
        .composite()
        .as_quadratic(n)
        .ok_or_else(|| Error::contract("exact_cubic_step needs a zero or quadratic composite"))?;
    let norm = model.norm();
    let x = model.center();

    let mut g = model.smooth_gradient_at_center().clone();
    if quad.mu != 0.0 {
        g += norm.apply(&(x - &quad.center)) * quad.mu;
    }
    let mut a_tilde = norm.whiten_operator(hess);
    for i in 0..n {
        a_tilde[(i, i)] += quad.mu;
    }
    let g_tilde = norm.whiten_dual(&g);
    let u = cubic_secular_solve(&a_tilde, &g_tilde, model.h())?;
    let point = x + norm.unwhiten_primal(&u);
    let model_value = model.value(&point);
    Ok(StepResult {
        point,
        model_value,
        certified_residual: 0.0,
        inner_iterations: 0,
        certification: Certification::ExactOracle,
        best_values: vec![model_value],
    })
}

/// Minimizes `⟨g, u⟩ + ½⟨Au, u⟩ + (H/6)‖u‖³` in the Euclidean norm.
fn cubic_secular_solve(
    a: &nalgebra::DMatrix<f64>,
    g: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let n = g.len();
    let eig = sym_eigendecomposition(a)?;
    let lambda = &eig.values;
    let gamma = eig.vectors.tr_mul(g);
    let gnorm = g.norm();
    let lmin = lambda[0];

    if h == 0.0 {
        if !(lmin > 0.0) {
            return Err(Error::Numerical(
                "unregularized model is not strongly convex".into(),
            ));
        }
        let coef = DVector::from_fn(n, |i, _| -gamma[i] / lambda[i]);
        return Ok(&eig.vectors * coef);
    }
    if gnorm == 0.0 && lmin >= 0.0 {
        return Ok(DVector::zeros(n));
    }

    let half_h = 0.5 * h;
    let r_min = (-lmin / half_h).max(0.0);
    let scale = lambda.amax().max(1.0);
    let bottom: Vec<bool> = lambda.iter().map(|&l| l <= lmin + 1e-12 * scale).collect();
    let hard_candidate = (0..n).all(|i| !bottom[i] || gamma[i].abs() <= f64::EPSILON * gnorm);

    let coeffs = |r: f64, skip_bottom: bool| -> DVector<f64> {
        DVector::from_fn(n, |i, _| {
            if skip_bottom && bottom[i] {
                0.0
            } else {
                -gamma[i] / (lambda[i] + half_h * r)
            }
        })
    };

    if hard_candidate && r_min > 0.0 {
        let rest = coeffs(r_min, true);
        let rest_norm = rest.norm();
        if rest_norm <= r_min {
            let mut c = rest;
            let first = bottom.iter().position(|&b| b).unwrap_or(0);
            c[first] = (r_min * r_min - rest_norm * rest_norm).max(0.0).sqrt();
            return Ok(&eig.vectors * c);
        }
    }

    // psi(r) = ‖u(r)‖ − r is convex and decreasing on (r_min, ∞).
    let psi = |r: f64| -> (f64, f64) {
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        for i in 0..n {
            let d = lambda[i] + half_h * r;
            let t = gamma[i] / d;
            s2 += t * t;
            s3 += t * t / d;
        }
        let un = s2.sqrt();
        let deriv = if un > 0.0 {
            -half_h * s3 / un - 1.0
        } else {
            -1.0
        };
        (un - r, deriv)
    };

    let mut lo = r_min;
    let mut hi = (r_min + (gnorm / half_h).sqrt())
        .max(r_min * 2.0)
        .max(1e-300);
    let mut guard = 0;
    while psi(hi).0 > 0.0 {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 2000 || !hi.is_finite() {
            return Err(Error::Numerical(
                "secular equation: failed to bracket the root".into(),
            ));
        }
    }
    let mut r = hi;
    for _ in 0..500 {
        if hi - lo <= SECULAR_RTOL * hi {
            break;
        }
        let (val, deriv) = psi(r);
        if val == 0.0 {
            break;
        }
        if val > 0.0 {
            lo = r;
        } else {
            hi = r;
        }
        let newton = r - val / deriv;
        if (newton - r).abs() <= 1e-15 * r {
            break;
        }
        r = if newton > lo && newton < hi && deriv.is_finite() {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if val.abs() <= SECULAR_RTOL * 1e-2 * r.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let r = if psi(r).0.abs() <= psi(hi).0.abs() {
        r
    } else {
        hi
    };
    if r <= r_min {
        return Err(Error::Numerical(
            "secular equation: root at the spectral boundary".into(),
        ));
    }
    Ok(&eig.vectors * coeffs(r, false))
}

/// Closed-form minimizer of the first-order model when `ψ` is zero or
/// quadratic: `T = x − (B⁻¹∇f(x) + μ(x − c))/(H + μ)`.
pub fn composite_gradient_step(model: &TensorModel) -> Result<StepResult> {
    if model.order() != Order::First {
        return Err(Error::contract(
            "composite_gradient_step needs a first-order model",
        ));
    }
    let x = model.center();
    let quad = model.composite().as_quadratic(x.len()).ok_or_else(|| {
        Error::contract("composite_gradient_step supports only zero or quadratic composites")
    })?;
    let denom = model.h() + quad.mu;
    if !(denom > 0.0) {
        return Err(Error::contract(
            "first-order model has no curvature (H + mu = 0)",
        ));
    }
    let mut dir = model.norm().solve(model.smooth_gradient_at_center());
    if quad.mu != 0.0 {
        dir += (x - &quad.center) * quad.mu;
    }
    let point = x - dir / denom;
    let model_value = model.value(&point);
    Ok(StepResult {
        point,
        model_value,
        certified_residual: 0.0,
        inner_iterations: 0,
        certification: Certification::ClosedForm,
        best_values: vec![model_value],
    })
}

#[derive(Clone, Debug)]
pub struct FgmOptions {
    pub stop: StopRule,
    /// Defaults to `10 000·⌈ln(1/δ)⌉` (at least 10 000).
    pub max_iterations: Option<usize>,
    /// Stall when the best certificate has not improved for this many
    /// iterations.
    pub stall_window: usize,
}

impl Default for FgmOptions {
    fn default() -> Self {
        FgmOptions {
            stop: StopRule::Bound,
            max_iterations: None,
            stall_window: 2000,
        }
    }
}

impl FgmOptions {
    pub fn with_stop(stop: StopRule) -> Self {
        FgmOptions {
            stop,
            ..Self::default()
        }
    }
}

pub fn default_iteration_cap(delta: f64) -> usize {
    let logs = (1.0 / delta).ln().ceil();
    10_000
        * if logs.is_finite() && logs > 1.0 {
            logs as usize
        } else {
            1
        }
}

struct Probe {
    value: f64,
    grad: DVector<f64>,
    grad_dual: f64,
    precond_grad: DVector<f64>,
}

fn probe(model: &TensorModel, y: &DVector<f64>) -> Probe {
    let (value, grad) = model.value_gradient(y);
    let precond_grad = model.norm().solve(&grad);
    let grad_dual = grad.dot(&precond_grad).max(0.0).sqrt();
    Probe {
        value,
        grad,
        grad_dual,
        precond_grad,
    }
}

/// Accelerated gradient method in the `B`-metric on `g = Ω_H(x;·)` with
/// backtracking on the local Lipschitz estimate and restarts whenever `g`
/// would increase. Returns the first iterate whose certificate is `≤ δ`.
pub fn fgm_inexact_step(
    model: &TensorModel,
    delta: f64,
    warm_start: Option<&DVector<f64>>,
    options: &FgmOptions,
) -> Result<StepResult> {
    if !(delta > 0.0) {
        return Err(Error::contract(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let g_star = match options.stop {
        StopRule::Bound => None,
        StopRule::Exact => Some(exact_cubic_step(model)?.model_value),
    };
    let certify = |p: &Probe| -> f64 {
        match g_star {
            None => model_certificate(model, p.grad_dual),
            Some(gs) => (p.value - gs).max(0.0),
        }
    };
    let certification = match options.stop {
        StopRule::Bound => Certification::Bound,
        StopRule::Exact => Certification::ExactOracle,
    };
    let cap = options
        .max_iterations
        .unwrap_or_else(|| default_iteration_cap(delta));

    let start = warm_start
        .cloned()
        .unwrap_or_else(|| model.center().clone());
    let mut current = probe(model, &start);
    let mut x = start;
    let mut best_cert = certify(&current);
    let mut best_point = x.clone();
    let mut best_values = vec![current.value];
    let done =
        |point: DVector<f64>, value: f64, cert: f64, iters: usize, hist: Vec<f64>| StepResult {
            point,
            model_value: value,
            certified_residual: cert,
            inner_iterations: iters,
            certification,
            best_values: hist,
        };
    if best_cert <= delta {
        return Ok(done(x, current.value, best_cert, 0, best_values));
    }

    let mut lip = initial_lipschitz(model, &x, &current);
    let mut y = x.clone();
    let mut at_y = probe(model, &y);
    let mut t = 1.0f64;
    let mut since_improvement = 0usize;

    for iter in 1..=cap {
        // Backtracking gradient step from y.
        let prev_lip = lip;
        lip *= 0.5;
        let (x_new, at_new) = loop {
            let cand = &y - &at_y.precond_grad / lip;
            let pc = probe(model, &cand);
            let decrease = at_y.grad_dual * at_y.grad_dual / (2.0 * lip);
            let slack = 1e-15 * at_y.value.abs().max(1.0);
            if pc.value <= at_y.value - decrease + slack {
                break (cand, pc);
            }
            lip *= 2.0;
            if !lip.is_finite() || lip > 1e300 {
                return Err(Error::SubsolverStall {
                    best: best_point,
                    residual: best_cert,
                    iterations: iter,
                });
            }
        };

        if at_new.value > current.value {
            // Momentum overshot: restart from the last accepted iterate.
            t = 1.0;
            y = x.clone();
            at_y = Probe {
                value: current.value,
                grad: current.grad.clone(),
                grad_dual: current.grad_dual,
                precond_grad: current.precond_grad.clone(),
            };
            best_values.push(*best_values.last().unwrap());
            since_improvement += 1;
        } else {
            let theta = lip / prev_lip;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            t = t_next;
            let step = &x_new - &x;
            y = &x_new + step * beta;
            x = x_new;
            current = at_new;
            at_y = if beta == 0.0 {
                Probe {
                    value: current.value,
                    grad: current.grad.clone(),
                    grad_dual: current.grad_dual,
                    precond_grad: current.precond_grad.clone(),
                }
            } else {
                probe(model, &y)
            };
            best_values.push(current.value.min(*best_values.last().unwrap()));

            let cert = certify(&current);
            if cert < best_cert {
                best_cert = cert;
                best_point = x.clone();
                since_improvement = 0;
            } else {
                since_improvement += 1;
            }
            if cert <= delta {
                return Ok(done(x, current.value, cert, iter, best_values));
            }
        }
        if since_improvement >= options.stall_window {
            return Err(Error::SubsolverStall {
                best: best_point,
                residual: best_cert,
                iterations: iter,
            });
        }
    }
    Err(Error::SubsolverStall {
        best: best_point,
        residual: best_cert,
        iterations: cap,
    })
}

/// Local gradient-Lipschitz estimate from one gradient difference.
fn initial_lipschitz(model: &TensorModel, x: &DVector<f64>, at_x: &Probe) -> f64 {
    let scale = model.norm().norm(&at_x.precond_grad);
    if scale == 0.0 {
        return 1.0;
    }
    let eps = 1e-4 * (1.0 + model.norm().norm(x)) / scale;
    let z = x - &at_x.precond_grad * eps;
    let gz = model.gradient(&z);
    let diff = model.norm().dual(&(gz - &at_x.grad));
    let est = diff / (eps * scale);
    if est.is_finite() && est > 0.0 {
        est
    } else {
        1.0
    }
}

/// Computes a δ-step with the chosen subsolver.
pub fn inexact_step(
    model: &TensorModel,
    delta: f64,
    warm_start: Option<&DVector<f64>>,
    kind: SubsolverKind,
    fgm_options: Option<&FgmOptions>,
) -> Result<StepResult> {
    match (kind, model.order()) {
        (SubsolverKind::Exact, Order::Second) => exact_cubic_step(model),
        (SubsolverKind::Exact, Order::First) => composite_gradient_step(model),
        (SubsolverKind::Fgm { stop }, _) => {
            let default = FgmOptions::with_stop(stop);
            let opts = match fgm_options {
                Some(o) => FgmOptions { stop, ..o.clone() },
                None => default,
            };
            fgm_inexact_step(model, delta, warm_start, &opts)
        }
    }
}

/// Result of [`monotone_step`].
#[derive(Clone, Debug)]
pub struct MonotoneOutcome {
    pub step: StepResult,
    /// `F(T)` at the returned point.
    pub objective: f64,
    /// Accuracy at which the returned point was computed.
    pub delta_used: f64,
    /// `false` when `δ` fell below the floor without `F(T) < F(x)`; the
    /// center is then treated as stationary.
    pub decreased: bool,
    /// Subsolver iterations summed over all refinements.
    pub total_inner_iterations: usize,
}

pub fn default_monotone_floor(f0: f64) -> f64 {
    1e-14 * f0.abs().max(1.0)
}

/// δ-step with strict decrease: halves `δ` and resumes the subsolver from
/// the last point until `F(T) < F(x)` or `δ < floor`.
#[allow(clippy::too_many_arguments)]
pub fn monotone_step(
    problem: &ProblemInstance,
    model: &TensorModel,
    f_center: f64,
    delta: f64,
    floor: f64,
    kind: SubsolverKind,
    warm_start: Option<&DVector<f64>>,
    fgm_options: Option<&FgmOptions>,
) -> Result<MonotoneOutcome> {
    if !(floor > 0.0) {
        return Err(Error::contract("monotone floor must be positive"));
    }
    let mut delta = delta.max(floor);
    let mut warm = warm_start.cloned();
    let mut total = 0usize;
    loop {
        let step = inexact_step(model, delta, warm.as_ref(), kind, fgm_options)?;
        total += step.inner_iterations;
        let objective = problem.value(&step.point);
        let exact = kind == SubsolverKind::Exact;
        if objective < f_center || exact || delta * 0.5 < floor {
            return Ok(MonotoneOutcome {
                decreased: objective < f_center,
                objective,
                delta_used: delta,
                total_inner_iterations: total,
                step,
            });
        }
        delta *= 0.5;
        warm = Some(step.point);
    }
}
