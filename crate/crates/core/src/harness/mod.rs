//! Experiment plumbing: configuration files, problem construction, runs with
//! persisted traces, reference optimal values, rate fits and comparisons.

mod compare;
mod fit;
mod reference;
mod trace;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::accel::{accelerated_method, AccelConfig};
use crate::error::{Error, Result};
use crate::methods::{
    averaging_method, monotone_method_i, monotone_method_ii, MethodKind, RunStatus, SolverConfig,
    SolverRun,
};
use crate::problems::{
    logistic_instance, parse_libsvm, powered_chain_instance, shifted_logsumexp_instance,
    synthetic_classification, CompositePart, ProblemInstance,
};

pub use compare::{
    aligned_table, compare, compare_runs, ComparisonEntry, ComparisonReport, MetricWinners,
    TargetComparison, COMPARE_TARGETS,
};
pub use fit::{fit_rate, fit_rate_records, plateau_threshold, FStarSource, RateFit, TailRatio};
pub use reference::{reference_cache_key, reference_optimum, resolve_f_star};
pub use trace::{read_trace, trace_csv, write_trace, TraceRow, TRACE_COLUMNS};

pub const SCHEMA_VERSION: u32 = 1;

/// Exit code of a run that ended in a subsolver stall or a diverging line
/// search.
pub const EXIT_STALL: i32 = 2;

/// A problem family and its parameters. `seed` falls back to the experiment
/// seed when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Shifted log-sum-exp with uniform `[−1, 1]` data and `x* = 0`.
    Logsumexp {
        n: usize,
        m: usize,
        mu: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Powered-difference chain with `x* = 0`.
    Chain { n: usize, q: f64, c: f64 },
    /// ℓ2-logistic regression on synthetic separable-ish data.
    Logistic {
        n: usize,
        m: usize,
        l2: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// ℓ2-logistic regression on a LIBSVM file.
    Libsvm { path: PathBuf, l2: f64 },
}

impl ProblemSpec {
    /// Same spec with the generator seed made explicit.
    pub fn with_seed(&self, fallback: u64) -> ProblemSpec {
        let mut out = self.clone();
        match &mut out {
            ProblemSpec::Logsumexp { seed, .. } | ProblemSpec::Logistic { seed, .. } => {
                seed.get_or_insert(fallback);
            }
            ProblemSpec::Chain { .. } | ProblemSpec::Libsvm { .. } => {}
        }
        out
    }
}

impl FromStr for ProblemSpec {
    type Err = Error;

    /// `family:key=value,...`, e.g. `logsumexp:n=100,m=600,mu=0.05`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut map = Map::new();
        map.insert("name".into(), Value::String(name.trim().to_string()));
        for pair in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, raw) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("problem '{s}': expected key=value, got '{pair}'"))
            })?;
            let value = if let Ok(i) = raw.parse::<u64>() {
                Value::from(i)
            } else if let Ok(x) = raw.parse::<f64>() {
                Value::from(x)
            } else {
                Value::String(raw.to_string())
            };
            map.insert(key.trim().to_string(), value);
        }
        serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("problem '{s}': {e}")))
    }
}

/// Optional `ψ`, centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompositeSpec {
    /// `μ/q ‖x‖^q`.
    PowerNorm { mu: f64, q: f64 },
    /// `μ/2 ‖x‖²`.
    Quadratic { mu: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub label: Option<String>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub composite: Option<CompositeSpec>,
    /// Multiplies the family's default starting point.
    #[serde(default)]
    pub x0_scale: Option<f64>,
    pub method: MethodKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Used only by the accelerated method.
    #[serde(default)]
    pub accel: AccelConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Where reference optimal values are cached; `.fstar-cache` if unset.
    #[serde(default)]
    pub fstar_cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemSpec, method: MethodKind, solver: SolverConfig) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            label: None,
            problem,
            composite: None,
            x0_scale: None,
            method,
            seed: 0,
            solver,
            accel: AccelConfig::default(),
            output_dir: None,
            fstar_cache_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.check_schema()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::Config(format!("{}: {inner}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn check_schema(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        Ok(())
    }

    /// Copy with every default spelled out, as written next to a trace.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.problem = self.problem.with_seed(self.seed);
        if out.accel.zeta.is_none() {
            out.accel.zeta = Some(out.accel.zeta_policy(out.solver.order));
        }
        if out.label.is_none() {
            out.label = Some(self.display_label());
        }
        out
    }

    /// `label` if set, otherwise method, policy and `H` mode.
    pub fn display_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            format!(
                "{}-{}-{}",
                self.method.name(),
                self.solver.policy,
                self.solver.h_mode
            )
        })
    }

    fn cache_dir(&self) -> PathBuf {
        self.fstar_cache_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(".fstar-cache"))
    }
}

/// Builds the problem instance described by `spec` (plus `ψ`), using
/// `seed` when the spec carries none.
pub fn build_problem(
    spec: &ProblemSpec,
    composite: Option<&CompositeSpec>,
    seed: u64,
) -> Result<ProblemInstance> {
    let base = match spec.with_seed(seed) {
        ProblemSpec::Logsumexp { n, m, mu, seed } => {
            shifted_logsumexp_instance(n, m, mu, seed.unwrap_or(seed_default()))?
        }
        ProblemSpec::Chain { n, q, c } => powered_chain_instance(n, q, c)?,
        ProblemSpec::Logistic { n, m, l2, seed } => logistic_instance(
            synthetic_classification(n, m, seed.unwrap_or(seed_default()))?,
            l2,
        )?,
        ProblemSpec::Libsvm { path, l2 } => logistic_instance(parse_libsvm(&path)?, l2)?,
    };
    let n = base.dim();
    let origin = nalgebra::DVector::zeros(n);
    Ok(match composite {
        None => base,
        Some(CompositeSpec::PowerNorm { mu, q }) => {
            base.with_composite(Arc::new(CompositePart::power_norm(*mu, *q, origin)?))
        }
        Some(CompositeSpec::Quadratic { mu }) => {
            base.with_composite(Arc::new(CompositePart::quadratic(*mu, origin)?))
        }
    })
}

fn seed_default() -> u64 {
    0
}

/// Runs the configured method on an already-built problem.
pub fn solve(
    problem: &ProblemInstance,
    method: MethodKind,
    solver: &SolverConfig,
    accel: &AccelConfig,
) -> Result<SolverRun> {
    match method {
        MethodKind::MonotoneI => monotone_method_i(problem, solver),
        MethodKind::MonotoneII => monotone_method_ii(problem, solver),
        MethodKind::Averaging => averaging_method(problem, solver),
        MethodKind::Accelerated => accelerated_method(problem, solver, accel),
    }
}

/// JSON summary written beside each trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub label: String,
    pub method: MethodKind,
    pub problem: String,
    /// `target_reached`, `max_iterations`, `time_budget`, `monotone_floor`,
    /// `stalled` or `diverged`.
    pub status: String,
    pub status_detail: String,
    pub exit_code: i32,
    pub iterations: usize,
    pub final_objective: f64,
    pub final_gap: Option<f64>,
    pub best_gap: Option<f64>,
    pub f_star: Option<f64>,
    pub f_star_source: Option<FStarSource>,
    pub hvp_count: u64,
    pub grad_count: u64,
    pub rate_fit: Option<RateFit>,
    pub warnings: Vec<String>,
}

pub fn status_code(status: &RunStatus) -> (&'static str, i32) {
    match status {
        RunStatus::TargetReached => ("target_reached", 0),
        RunStatus::MaxIterations => ("max_iterations", 0),
        RunStatus::TimeBudget => ("time_budget", 0),
        RunStatus::MonotoneFloorReached => ("monotone_floor", 0),
        RunStatus::Stalled(_) => ("stalled", EXIT_STALL),
        RunStatus::Diverged(_) => ("diverged", EXIT_STALL),
    }
}

/// Everything produced by one run, before anything is written.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub run: SolverRun,
    pub summary: RunSummary,
}

impl RunArtifacts {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }

    /// Writes `config.json`, `trace.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.json"), &self.config.to_json()?)?;
        write_trace(&dir.join("trace.csv"), &self.run.records)?;
        write_text(
            &dir.join("summary.json"),
            &serde_json::to_string_pretty(&self.summary)?,
        )?;
        Ok(())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut body = text.to_string();
    if !body.ends_with('\n') {
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Resolves `F*`, runs the solver and assembles the summary. The only
/// filesystem access is the reference-value cache.
pub fn execute(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.check_schema()?;
    let mut resolved = config.resolved();
    let problem = build_problem(
        &resolved.problem,
        resolved.composite.as_ref(),
        resolved.seed,
    )?;
    let problem = match resolved.x0_scale {
        Some(s) => {
            let x0 = &problem.x0 * s;
            problem.with_x0(x0)?
        }
        None => problem,
    };
    let (f_star, source) = resolve_f_star(&resolved, &problem)?;
    if source == Some(FStarSource::ReferenceRun) {
        resolved.solver.f_star = f_star;
    }
    let run = solve(&problem, resolved.method, &resolved.solver, &resolved.accel)?;

    let p = resolved.solver.order.p();
    let mut warnings = resolved.solver.policy.warnings(p);
    if resolved.method == MethodKind::Accelerated {
        warnings.extend(
            resolved
                .accel
                .inner
                .warnings(p)
                .into_iter()
                .map(|w| format!("inner: {w}")),
        );
    }
    let rate_fit = match (run.f_star, source) {
        (Some(fs), Some(src)) => fit_rate_records(&run.records, fs, src, None, p).ok(),
        _ => None,
    };
    let (status, exit_code) = status_code(&run.status);
    let last = run.records.last();
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        label: resolved.display_label(),
        method: resolved.method,
        problem: run.problem.clone(),
        status: status.to_string(),
        status_detail: run.status.describe(),
        exit_code,
        iterations: last.map(|r| r.k).unwrap_or(0),
        final_objective: run.final_objective(),
        final_gap: last.and_then(|r| r.gap),
        best_gap: run.records.iter().filter_map(|r| r.gap).reduce(f64::min),
        f_star: run.f_star,
        f_star_source: source,
        hvp_count: run.total_hvp(),
        grad_count: last.map(|r| r.grad_count).unwrap_or(0),
        rate_fit,
        warnings,
    };
    Ok(RunArtifacts {
        config: resolved,
        run,
        summary,
    })
}

/// [`execute`] and write the artifacts to `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let dir = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("run needs an output directory".into()))?;
    let artifacts = execute(config)?;
    artifacts.write(&dir)?;
    Ok(artifacts)
}
