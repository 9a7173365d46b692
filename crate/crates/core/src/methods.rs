//! Non-accelerated outer loops: two monotone inexact tensor methods, the
//! averaging method, and the doubling line search on `H`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CurvatureMode, Order, TensorModel};
use crate::policies::AccuracyPolicy;
use crate::problems::{OracleCounters, ProblemInstance};
use crate::subsolvers::{
    default_monotone_floor, inexact_step, monotone_step, FgmOptions, StepResult, StopRule,
    SubsolverKind,
};

/// How the regularization constant `H` is chosen. Serialized as
/// `"fixed:H"`, `"lipschitz"` or `"linesearch:H0"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HMode {
    Fixed {
        h: f64,
    },
    /// `H = p·L_p`.
    FromLipschitz,
    /// Doubling search started at `h0`, restarted from half the last
    /// accepted value.
    LineSearch {
        h0: f64,
    },
}

impl std::fmt::Display for HMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HMode::Fixed { h } => write!(f, "fixed:{h}"),
            HMode::FromLipschitz => write!(f, "lipschitz"),
            HMode::LineSearch { h0 } => write!(f, "linesearch:{h0}"),
        }
    }
}

impl std::str::FromStr for HMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let value = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("H mode '{s}': '{v}' is not a number")))
        };
        match s.split_once(':') {
            None if s == "lipschitz" => Ok(HMode::FromLipschitz),
            None if s == "linesearch" => Ok(HMode::LineSearch { h0: 1.0 }),
            Some(("fixed", v)) => Ok(HMode::Fixed { h: value(v)? }),
            Some(("linesearch", v)) => Ok(HMode::LineSearch { h0: value(v)? }),
            _ => Err(Error::Config(format!(
                "cannot parse H mode '{s}' (fixed:<v>, lipschitz, linesearch[:<v>])"
            ))),
        }
    }
}

impl TryFrom<String> for HMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HMode> for String {
    fn from(h: HMode) -> String {
        h.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    #[serde(rename = "monotone1")]
    MonotoneI,
    #[serde(rename = "monotone2")]
    MonotoneII,
    Averaging,
    Accelerated,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::MonotoneI => "monotone1",
            MethodKind::MonotoneII => "monotone2",
            MethodKind::Averaging => "averaging",
            MethodKind::Accelerated => "accelerated",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monotone1" => Ok(MethodKind::MonotoneI),
            "monotone2" => Ok(MethodKind::MonotoneII),
            "averaging" => Ok(MethodKind::Averaging),
            "accelerated" => Ok(MethodKind::Accelerated),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (monotone1, monotone2, averaging, accelerated)"
            ))),
        }
    }
}

/// Absent fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub order: Order,
    pub h_mode: HMode,
    pub policy: AccuracyPolicy,
    pub subsolver: SubsolverKind,
    pub max_iterations: usize,
    /// Stop once `F(x_k) − F* ≤ target_gap` (needs a known or supplied `F*`).
    #[serde(default)]
    pub target_gap: Option<f64>,
    /// Stop once `‖∇F(x_k)‖_* ≤ gradient_tolerance`.
    #[serde(default)]
    pub gradient_tolerance: Option<f64>,
    /// Reference optimal value used when the problem has no known optimum.
    #[serde(default)]
    pub f_star: Option<f64>,
    /// Defaults to `1e-14·max(1, |F(x₀)|)`.
    #[serde(default)]
    pub monotone_floor: Option<f64>,
    #[serde(default)]
    pub record_wall_time: bool,
    /// Stop after this many seconds (makes the run timing-dependent).
    #[serde(default)]
    pub max_wall_time_s: Option<f64>,
    #[serde(default)]
    pub fgm_max_iterations: Option<usize>,
    #[serde(default = "default_stall_window")]
    pub fgm_stall_window: usize,
}

fn default_stall_window() -> usize {
    FgmOptions::default().stall_window
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            order: Order::Second,
            h_mode: HMode::FromLipschitz,
            policy: AccuracyPolicy::Power { c: 1.0, alpha: 3.0 },
            subsolver: SubsolverKind::Exact,
            max_iterations: 100,
            target_gap: None,
            gradient_tolerance: None,
            f_star: None,
            monotone_floor: None,
            record_wall_time: false,
            max_wall_time_s: None,
            fgm_max_iterations: None,
            fgm_stall_window: default_stall_window(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, problem: &ProblemInstance) -> Result<()> {
        match self.h_mode {
            HMode::Fixed { h } if !(h > 0.0 && h.is_finite()) => {
                return Err(Error::Config(format!("fixed H must be positive, got {h}")))
            }
            HMode::LineSearch { h0 } if !(h0 > 0.0 && h0.is_finite()) => {
                return Err(Error::Config(format!(
                    "line-search H0 must be positive, got {h0}"
                )))
            }
            HMode::FromLipschitz if problem.lipschitz(self.order.p()).is_none() => {
                return Err(Error::Config(format!(
                    "H = pL_p requested but L_{} is unknown for {}",
                    self.order.p(),
                    problem.name
                )))
            }
            _ => {}
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if let SubsolverKind::Fgm {
            stop: StopRule::Exact,
        } = self.subsolver
        {
            if self.order != Order::Second {
                return Err(Error::Config("the exact stopping rule needs p = 2".into()));
            }
        }
        self.policy.validated()?;
        Ok(())
    }

    pub(crate) fn fgm_options(&self) -> FgmOptions {
        FgmOptions {
            stop: match self.subsolver {
                SubsolverKind::Fgm { stop } => stop,
                SubsolverKind::Exact => StopRule::Bound,
            },
            max_iterations: self.fgm_max_iterations,
            stall_window: self.fgm_stall_window,
        }
    }

    fn curvature_mode(&self) -> CurvatureMode {
        match self.subsolver {
            SubsolverKind::Exact
            | SubsolverKind::Fgm {
                stop: StopRule::Exact,
            } => CurvatureMode::Dense,
            SubsolverKind::Fgm {
                stop: StopRule::Bound,
            } => CurvatureMode::Operator,
        }
    }
}

/// One row of a run trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `F(x_k)`.
    pub objective: f64,
    /// `F(x_k) − F*` when `F*` is available.
    pub gap: Option<f64>,
    pub delta_requested: Option<f64>,
    pub delta_certified: Option<f64>,
    pub h_used: Option<f64>,
    pub inner_iterations: usize,
    /// `‖∇F(x_k)‖_*`.
    pub grad_norm: f64,
    /// Cumulative Hessian-vector products, counting a dense Hessian as `n`.
    pub hvp_count: u64,
    pub grad_count: u64,
    /// `‖x_k − x*‖` when `x*` is known.
    pub dist_to_opt: Option<f64>,
    /// Whether the step producing `x_k` was accepted (always true at `k = 0`).
    pub accepted: bool,
    pub time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum RunStatus {
    TargetReached,
    MaxIterations,
    TimeBudget,
    /// No strict decrease was possible above the accuracy floor.
    MonotoneFloorReached,
    Stalled(String),
    Diverged(String),
}

impl RunStatus {
    pub fn is_stall(&self) -> bool {
        matches!(self, RunStatus::Stalled(_) | RunStatus::Diverged(_))
    }

    pub fn describe(&self) -> String {
        match self {
            RunStatus::TargetReached => "target reached".into(),
            RunStatus::MaxIterations => "iteration limit".into(),
            RunStatus::TimeBudget => "wall-time budget".into(),
            RunStatus::MonotoneFloorReached => "monotone floor reached".into(),
            RunStatus::Stalled(m) => format!("subsolver stall: {m}"),
            RunStatus::Diverged(m) => format!("line search diverged: {m}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverRun {
    pub method: MethodKind,
    pub problem: String,
    pub records: Vec<TraceRecord>,
    pub status: RunStatus,
    pub x_final: DVector<f64>,
    pub f_star: Option<f64>,
}

impl SolverRun {
    pub fn final_objective(&self) -> f64 {
        self.records.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }

    pub fn total_hvp(&self) -> u64 {
        self.records.last().map(|r| r.hvp_count).unwrap_or(0)
    }

    /// First record whose gap is at most `eps`.
    pub fn first_reaching(&self, eps: f64) -> Option<&TraceRecord> {
        self.records
            .iter()
            .find(|r| r.gap.is_some_and(|g| g <= eps))
    }

    /// `max_j ‖x_j − x*‖` over the trace; a lower estimate of the level-set
    /// radius.
    pub fn radius_proxy(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.dist_to_opt)
            .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
    }
}

/// Problem with counted oracle calls and the bookkeeping needed for traces.
pub(crate) struct Instrumented {
    pub problem: ProblemInstance,
    counters: Arc<OracleCounters>,
    pub dense_products: u64,
    started: Instant,
    record_time: bool,
}

impl Instrumented {
    pub fn new(problem: &ProblemInstance, wall_time: bool) -> Self {
        let (problem, counters) = problem.instrumented();
        Instrumented {
            problem,
            counters,
            dense_products: 0,
            started: Instant::now(),
            record_time: wall_time,
        }
    }

    pub fn hvp_count(&self) -> u64 {
        self.counters.snapshot().hvp_equivalent(self.problem.dim()) + self.dense_products
    }

    pub fn grad_count(&self) -> u64 {
        self.counters.snapshot().gradients
    }

    pub fn elapsed(&self) -> Option<f64> {
        self.record_time
            .then(|| self.started.elapsed().as_secs_f64())
    }

    pub fn over_budget(&self, budget: Option<f64>) -> bool {
        budget.is_some_and(|b| self.started.elapsed().as_secs_f64() >= b)
    }
}

/// Outcome of one outer step.
#[derive(Clone, Debug)]
pub(crate) struct StepOutcome {
    pub point: DVector<f64>,
    pub objective: f64,
    pub certified: f64,
    pub inner_iterations: usize,
    pub h_used: f64,
    pub delta_used: f64,
    pub decreased: bool,
}

/// Computes outer steps for a fixed problem, owning the `H` state.
pub(crate) struct Stepper {
    order: Order,
    kind: SubsolverKind,
    fgm: FgmOptions,
    mode: CurvatureMode,
    h_mode: HMode,
    h_fixed: f64,
    h_next: f64,
    pub floor: f64,
}

/// Relative slack in the line-search acceptance test `F(T) ≤ Ω_H(x;T)`.
const LINE_SEARCH_RTOL: f64 = 1e-12;
const LINE_SEARCH_MAX_DOUBLINGS: i32 = 60;

impl Stepper {
    pub fn new(problem: &ProblemInstance, config: &SolverConfig, f0: f64) -> Result<Self> {
        let p = config.order.p();
        let (h_fixed, h_next) = match config.h_mode {
            HMode::Fixed { h } => (h, h),
            HMode::FromLipschitz => {
                let lp = problem
                    .lipschitz(p)
                    .ok_or_else(|| Error::Config(format!("L_{p} unknown for {}", problem.name)))?;
                let h = p as f64 * lp;
                (h, h)
            }
            HMode::LineSearch { h0 } => (h0, h0),
        };
        Ok(Stepper {
            order: config.order,
            kind: config.subsolver,
            fgm: config.fgm_options(),
            mode: config.curvature_mode(),
            h_mode: config.h_mode,
            h_fixed,
            h_next,
            floor: config
                .monotone_floor
                .unwrap_or_else(|| default_monotone_floor(f0)),
        })
    }

    /// One δ-step from `x`. With `monotone` the step is refined until
    /// `F(T) < F(x)` or the floor is hit.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        inst: &mut Instrumented,
        x: &DVector<f64>,
        f_total: f64,
        f_smooth: f64,
        grad_smooth: &DVector<f64>,
        delta: f64,
        warm: Option<&DVector<f64>>,
        monotone: bool,
    ) -> Result<StepOutcome> {
        let line_search = matches!(self.h_mode, HMode::LineSearch { .. });
        let h_start = if line_search {
            self.h_next
        } else {
            self.h_fixed
        };
        let base = TensorModel::with_center_data(
            &inst.problem,
            x,
            f_smooth,
            grad_smooth.clone(),
            self.order,
            h_start,
            self.mode,
        )?;
        let delta = delta.max(self.floor);
        let mut h = h_start;
        let mut doublings = 0;
        loop {
            let owned;
            let model = if h == h_start {
                &base
            } else {
                owned = base.with_h(h)?;
                &owned
            };
            let result = if monotone {
                monotone_step(
                    &inst.problem,
                    model,
                    f_total,
                    delta,
                    self.floor,
                    self.kind,
                    warm,
                    Some(&self.fgm),
                )
                .map(|o| StepOutcome {
                    objective: o.objective,
                    certified: o.step.certified_residual,
                    inner_iterations: o.total_inner_iterations,
                    h_used: h,
                    delta_used: o.delta_used,
                    decreased: o.decreased,
                    point: o.step.point,
                })
            } else {
                inexact_step(model, delta, warm, self.kind, Some(&self.fgm)).map(|s: StepResult| {
                    let objective = inst.problem.value(&s.point);
                    StepOutcome {
                        decreased: objective < f_total,
                        objective,
                        certified: s.certified_residual,
                        inner_iterations: s.inner_iterations,
                        h_used: h,
                        delta_used: delta,
                        point: s.point,
                    }
                })
            };
            let outcome = match result {
                Ok(o) => o,
                Err(e) => {
                    inst.dense_products += model.dense_products();
                    return Err(e);
                }
            };
            if !line_search {
                inst.dense_products += model.dense_products();
                return Ok(outcome);
            }
            let upper = model.value(&outcome.point);
            inst.dense_products += model.dense_products();
            if outcome.objective <= upper + LINE_SEARCH_RTOL * f_total.abs().max(1.0) {
                self.h_next = h / 2.0;
                return Ok(outcome);
            }
            h *= 2.0;
            doublings += 1;
            let HMode::LineSearch { h0 } = self.h_mode else {
                unreachable!()
            };
            if doublings > LINE_SEARCH_MAX_DOUBLINGS
                || h > 2f64.powi(LINE_SEARCH_MAX_DOUBLINGS) * h0
            {
                return Err(Error::Divergence { h });
            }
        }
    }
}

/// Doubling search on `H` at a single point: returns the first step with
/// `F(T) ≤ Ω_H(x;T)` and the `H` that produced it.
pub fn line_search_h(
    problem: &ProblemInstance,
    x: &DVector<f64>,
    delta: f64,
    h0: f64,
    order: Order,
    subsolver: SubsolverKind,
) -> Result<(DVector<f64>, f64)> {
    let config = SolverConfig {
        order,
        h_mode: HMode::LineSearch { h0 },
        subsolver,
        ..SolverConfig::default()
    };
    if !(h0 > 0.0) {
        return Err(Error::contract("line search needs H0 > 0"));
    }
    let mut inst = Instrumented::new(problem, false);
    let (fs, g) = inst.problem.smooth.value_gradient(x);
    let f_total = fs + inst.problem.composite.value(&inst.problem.norm, x);
    let mut stepper = Stepper::new(problem, &config, f_total)?;
    let out = stepper.step(&mut inst, x, f_total, fs, &g, delta, None, false)?;
    Ok((out.point, out.h_used))
}

struct Point {
    x: DVector<f64>,
    f_total: f64,
    f_smooth: f64,
    grad_smooth: DVector<f64>,
    grad_norm: f64,
}

fn evaluate(problem: &ProblemInstance, x: DVector<f64>) -> Point {
    let (f_smooth, grad_smooth) = problem.smooth.value_gradient(&x);
    let f_total = f_smooth + problem.composite.value(&problem.norm, &x);
    let full = &grad_smooth + problem.composite.gradient(&problem.norm, &x);
    Point {
        grad_norm: problem.norm.dual(&full),
        x,
        f_total,
        f_smooth,
        grad_smooth,
    }
}

pub(crate) struct Tracer {
    pub records: Vec<TraceRecord>,
    pub f_star: Option<f64>,
}

impl Tracer {
    pub fn new(problem: &ProblemInstance, config: &SolverConfig) -> Self {
        Tracer {
            records: Vec::new(),
            f_star: problem.optimal_value().or(config.f_star),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        inst: &Instrumented,
        k: usize,
        x: &DVector<f64>,
        objective: f64,
        grad_norm: f64,
        step: Option<&StepOutcome>,
        delta_requested: Option<f64>,
        accepted: bool,
    ) {
        self.records.push(TraceRecord {
            k,
            objective,
            gap: self.f_star.map(|fs| objective - fs),
            delta_requested,
            delta_certified: step.map(|s| s.certified),
            h_used: step.map(|s| s.h_used),
            inner_iterations: step.map_or(0, |s| s.inner_iterations),
            grad_norm,
            hvp_count: inst.hvp_count(),
            grad_count: inst.grad_count(),
            dist_to_opt: inst.problem.distance_to_optimum(x),
            accepted,
            time_s: inst.elapsed(),
        });
    }

    pub fn target_met(&self, config: &SolverConfig) -> bool {
        let Some(last) = self.records.last() else {
            return false;
        };
        let gap_ok = match (config.target_gap, last.gap) {
            (Some(t), Some(g)) => g <= t,
            _ => false,
        };
        let grad_ok = config
            .gradient_tolerance
            .is_some_and(|t| last.grad_norm <= t);
        gap_ok || grad_ok
    }
}

pub(crate) fn status_from_error(e: Error) -> Result<RunStatus> {
    match e {
        Error::SubsolverStall {
            residual,
            iterations,
            ..
        } => Ok(RunStatus::Stalled(format!(
            "best certified residual {residual:e} after {iterations} iterations"
        ))),
        Error::Divergence { h } => Ok(RunStatus::Diverged(format!("H = {h:e}"))),
        other => Err(other),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    One,
    Two,
}

fn run_monotone(
    problem: &ProblemInstance,
    config: &SolverConfig,
    variant: Variant,
) -> Result<SolverRun> {
    config.validate(problem)?;
    for w in config.policy.warnings(config.order.p()) {
        log::warn!("{w}");
    }
    let mut inst = Instrumented::new(problem, config.record_wall_time);
    let mut tracer = Tracer::new(problem, config);
    let mut cur = evaluate(&inst.problem, problem.x0.clone());
    let mut stepper = Stepper::new(problem, config, cur.f_total)?;
    tracer.push(
        &inst,
        0,
        &cur.x,
        cur.f_total,
        cur.grad_norm,
        None,
        None,
        true,
    );

    let mut prev_f: Option<f64> = None;
    let mut warm: Option<DVector<f64>> = None;
    let mut retry_delta: Option<f64> = None;
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
        let history = prev_f.map(|p| (p, cur.f_total));
        let requested = config.policy.next_delta(k + 1, history)?;
        let mut delta = requested;
        if let Some(r) = retry_delta {
            delta = delta.min(r);
            if delta < stepper.floor {
                status = RunStatus::MonotoneFloorReached;
                break;
            }
        }
        let outcome = match stepper.step(
            &mut inst,
            &cur.x,
            cur.f_total,
            cur.f_smooth,
            &cur.grad_smooth,
            delta,
            warm.as_ref(),
            variant == Variant::Two,
        ) {
            Ok(o) => o,
            Err(e) => {
                status = status_from_error(e)?;
                break;
            }
        };

        if outcome.decreased {
            prev_f = Some(cur.f_total);
            cur = evaluate(&inst.problem, outcome.point.clone());
            warm = None;
            retry_delta = None;
            tracer.push(
                &inst,
                k + 1,
                &cur.x,
                cur.f_total,
                cur.grad_norm,
                Some(&outcome),
                Some(requested),
                true,
            );
        } else {
            let exact = config.subsolver == SubsolverKind::Exact;
            tracer.push(
                &inst,
                k + 1,
                &cur.x,
                cur.f_total,
                cur.grad_norm,
                Some(&outcome),
                Some(requested),
                false,
            );
            if variant == Variant::Two || exact {
                status = RunStatus::MonotoneFloorReached;
                break;
            }
            // Keep x_k, resume from the rejected point with half the accuracy.
            prev_f = Some(cur.f_total);
            retry_delta = Some(outcome.delta_used / 2.0);
            warm = Some(outcome.point);
        }
    }
    if status == RunStatus::MaxIterations && tracer.target_met(config) {
        status = RunStatus::TargetReached;
    }
    Ok(SolverRun {
        method: match variant {
            Variant::One => MethodKind::MonotoneI,
            Variant::Two => MethodKind::MonotoneII,
        },
        problem: problem.name.clone(),
        records: tracer.records,
        status,
        x_final: cur.x,
        f_star: tracer.f_star,
    })
}

/// Accepts `T` only when `F(T) < F(x_k)`; a rejected `T` seeds the next
/// subsolve with half the accuracy.
pub fn monotone_method_i(problem: &ProblemInstance, config: &SolverConfig) -> Result<SolverRun> {
    run_monotone(problem, config, Variant::One)
}

/// Every step is refined until it strictly decreases `F`.
pub fn monotone_method_ii(problem: &ProblemInstance, config: &SolverConfig) -> Result<SolverRun> {
    run_monotone(problem, config, Variant::Two)
}

/// `λ_k = (k/(k+1))^{p+1}`.
pub fn averaging_weight(k: usize, order: Order) -> f64 {
    (k as f64 / (k as f64 + 1.0)).powi(order.p() as i32 + 1)
}

/// Steps from `y_k = λ_k x_k + (1 − λ_k)x₀` instead of `x_k`.
pub fn averaging_method(problem: &ProblemInstance, config: &SolverConfig) -> Result<SolverRun> {
    config.validate(problem)?;
    if config.policy.needs_history() {
        return Err(Error::Config(
            "the averaging method is not monotone; use a constant or power schedule".into(),
        ));
    }
    for w in config.policy.warnings(config.order.p()) {
        log::warn!("{w}");
    }
    let mut inst = Instrumented::new(problem, config.record_wall_time);
    let mut tracer = Tracer::new(problem, config);
    let x0 = problem.x0.clone();
    let mut cur = evaluate(&inst.problem, x0.clone());
    let mut stepper = Stepper::new(problem, config, cur.f_total)?;
    tracer.push(
        &inst,
        0,
        &cur.x,
        cur.f_total,
        cur.grad_norm,
        None,
        None,
        true,
    );
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
        let lambda = averaging_weight(k, config.order);
        let y = &cur.x * lambda + &x0 * (1.0 - lambda);
        let at_y = evaluate(&inst.problem, y);
        let requested = config.policy.next_delta(k + 1, None)?;
        let outcome = match stepper.step(
            &mut inst,
            &at_y.x,
            at_y.f_total,
            at_y.f_smooth,
            &at_y.grad_smooth,
            requested,
            None,
            false,
        ) {
            Ok(o) => o,
            Err(e) => {
                status = status_from_error(e)?;
                break;
            }
        };
        cur = evaluate(&inst.problem, outcome.point.clone());
        tracer.push(
            &inst,
            k + 1,
            &cur.x,
            cur.f_total,
            cur.grad_norm,
            Some(&outcome),
            Some(requested),
            true,
        );
    }
    if status == RunStatus::MaxIterations && tracer.target_met(config) {
        status = RunStatus::TargetReached;
    }
    Ok(SolverRun {
        method: MethodKind::Averaging,
        problem: problem.name.clone(),
        records: tracer.records,
        status,
        x_final: cur.x,
        f_star: tracer.f_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{shifted_logsumexp_instance, CompositePart, Quadratic};
    use nalgebra::DMatrix;

    #[test]
    fn averaging_weights() {
        assert_eq!(averaging_weight(0, Order::Second), 0.0);
        assert_eq!(averaging_weight(1, Order::Second), 0.125);
        assert_eq!(averaging_weight(1, Order::First), 0.25);
    }

    #[test]
    fn start_at_optimum_is_stationary() {
        let prob = shifted_logsumexp_instance(5, 30, 1.0, 3)
            .unwrap()
            .with_x0(DVector::zeros(5))
            .unwrap();
        let run = monotone_method_ii(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(run.status, RunStatus::MonotoneFloorReached);
        assert_eq!(
            run.records.iter().filter(|r| r.k > 0 && r.accepted).count(),
            0
        );
        let run = monotone_method_i(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(run.status, RunStatus::MonotoneFloorReached);
    }

    #[test]
    fn monotone_runs_decrease() {
        let prob = shifted_logsumexp_instance(10, 60, 1.0, 1).unwrap();
        let config = SolverConfig {
            max_iterations: 20,
            ..SolverConfig::default()
        };
        for run in [
            monotone_method_i(&prob, &config).unwrap(),
            monotone_method_ii(&prob, &config).unwrap(),
        ] {
            assert!(run
                .records
                .windows(2)
                .all(|w| w[1].objective <= w[0].objective));
            assert!(run.final_objective() < run.records[0].objective);
            assert!(run
                .records
                .windows(2)
                .all(|w| w[1].hvp_count >= w[0].hvp_count));
        }
    }

    #[test]
    fn line_search_is_immediate_on_quadratics() {
        let prob = ProblemInstance::new(
            "quad",
            Arc::new(Quadratic {
                q: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
                c: DVector::from_vec(vec![1.0, 1.0]),
            }),
            Arc::new(CompositePart::Zero),
            crate::linalg::NormOperator::identity(2),
            DVector::zeros(2),
        )
        .unwrap();
        let (_, h) = line_search_h(
            &prob,
            &DVector::zeros(2),
            1e-9,
            0.01,
            Order::Second,
            SubsolverKind::Exact,
        )
        .unwrap();
        assert_eq!(h, 0.01);
    }

    #[test]
    fn line_search_bounded_by_twice_lipschitz() {
        let prob = shifted_logsumexp_instance(6, 40, 1.0, 2).unwrap();
        let l2 = prob.lipschitz(2).unwrap();
        let (_, h) = line_search_h(
            &prob,
            &prob.x0,
            1e-9,
            l2 / 16.0,
            Order::Second,
            SubsolverKind::Exact,
        )
        .unwrap();
        assert!(h <= 2.0 * l2);
    }

    #[test]
    fn fixed_h_must_be_positive() {
        let prob = shifted_logsumexp_instance(3, 10, 1.0, 0).unwrap();
        let config = SolverConfig {
            h_mode: HMode::Fixed { h: 0.0 },
            ..SolverConfig::default()
        };
        assert!(monotone_method_i(&prob, &config).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = SolverConfig {
            subsolver: SubsolverKind::Fgm {
                stop: StopRule::Bound,
            },
            h_mode: HMode::LineSearch { h0: 0.5 },
            policy: AccuracyPolicy::Adaptive {
                c: 0.1,
                alpha: 1.5,
                delta1: 0.3,
            },
            ..SolverConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"linesearch:0.5\""));
        assert!(s.contains("\"fgm:bound\""));
        assert_eq!(serde_json::from_str::<SolverConfig>(&s).unwrap(), c);
        for bad in ["fixed", "fixed:x", "lipschitz:1", "newton"] {
            assert!(bad.parse::<HMode>().is_err());
        }
        assert_eq!("fixed:1".parse::<HMode>().unwrap(), HMode::Fixed { h: 1.0 });
    }
}
