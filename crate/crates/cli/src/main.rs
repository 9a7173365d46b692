use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tensorstep::harness::{
    compare, fit_rate, read_trace, run, ExperimentConfig, FStarSource, ProblemSpec, RunSummary,
    EXIT_STALL,
};
use tensorstep::methods::{HMode, MethodKind, SolverConfig};
use tensorstep::model::Order;
use tensorstep::policies::AccuracyPolicy;
use tensorstep::subsolvers::{StopRule, SubsolverKind};

#[derive(Parser)]
#[command(
    name = "tensorstep",
    version,
    about = "Inexact tensor methods: runs, comparisons and rate fits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write config.json, trace.csv and summary.json.
    Run(RunArgs),
    /// Run several configs on the same problem and report per-target winners.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        configs: Vec<PathBuf>,
        /// Directory for the per-run outputs and the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the log-log convergence slope of a trace.
    Fit {
        #[arg(long)]
        trace: PathBuf,
        /// A number, or `auto` to take F* from the neighbouring summary.json
        /// (falling back to the smallest objective in the trace).
        #[arg(long, default_value = "auto")]
        fstar: String,
        /// `LO:HI`; defaults to the whole trace.
        #[arg(long)]
        window: Option<String>,
        #[arg(long = "p", default_value_t = 2)]
        order: u32,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// e.g. `logsumexp:n=100,m=600,mu=0.05` or `chain:n=20,q=3,c=1`.
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long = "p")]
    order: Option<u32>,
    /// `fixed:<v>`, `lipschitz` or `linesearch:<v>`.
    #[arg(long = "H")]
    h_mode: Option<HMode>,
    /// `constant:C`, `power:C:ALPHA` or `adaptive:C:ALPHA[:DELTA1]`.
    #[arg(long)]
    policy: Option<AccuracyPolicy>,
    /// `exact` or `fgm`.
    #[arg(long)]
    subsolver: Option<String>,
    /// `bound` or `exact` (FGM stopping rule).
    #[arg(long)]
    stop: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    target_gap: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scale the problem's default starting point.
    #[arg(long)]
    x0_scale: Option<f64>,
    /// Record per-iteration wall time (makes traces differ between runs).
    #[arg(long)]
    record_time: bool,
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let (Some(problem), Some(method)) = (&args.problem, args.method) else {
                bail!("without --config both --problem and --method are required");
            };
            ExperimentConfig::new(problem.parse()?, method, SolverConfig::default())
        }
    };
    if let Some(p) = &args.problem {
        cfg.problem = p.parse::<ProblemSpec>()?;
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(p) = args.order {
        cfg.solver.order = Order::try_from(p)?;
    }
    if let Some(h) = args.h_mode {
        cfg.solver.h_mode = h;
    }
    if let Some(policy) = args.policy {
        cfg.solver.policy = policy;
    }
    let stop = match args.stop.as_deref() {
        None => None,
        Some("bound") => Some(StopRule::Bound),
        Some("exact") => Some(StopRule::Exact),
        Some(other) => bail!("unknown --stop '{other}' (bound, exact)"),
    };
    match (args.subsolver.as_deref(), stop) {
        (None, None) => {}
        (Some("exact"), Some(_)) => bail!("--stop only applies to --subsolver fgm"),
        (Some("exact"), None) => cfg.solver.subsolver = SubsolverKind::Exact,
        (Some("fgm"), s) => {
            cfg.solver.subsolver = SubsolverKind::Fgm {
                stop: s.unwrap_or(StopRule::Bound),
            }
        }
        (Some(other), _) => bail!("unknown --subsolver '{other}' (exact, fgm)"),
        (None, Some(s)) => match cfg.solver.subsolver {
            SubsolverKind::Fgm { .. } => cfg.solver.subsolver = SubsolverKind::Fgm { stop: s },
            SubsolverKind::Exact => bail!("--stop only applies to the fgm subsolver"),
        },
    }
    if let Some(n) = args.max_iters {
        cfg.solver.max_iterations = n;
    }
    if let Some(t) = args.target_gap {
        cfg.solver.target_gap = Some(t);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(s) = args.x0_scale {
        cfg.x0_scale = Some(s);
    }
    if args.record_time {
        cfg.solver.record_wall_time = true;
    }
    if cfg.output_dir.is_none() {
        bail!("no output directory: pass --out or set output_dir in the config");
    }
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    let gap = s
        .final_gap
        .map(|g| format!("{g:e}"))
        .unwrap_or_else(|| "-".into());
    println!(
        "{}: {} after {} iterations, F = {:e}, gap = {gap}, hvp = {}, grads = {}",
        s.label, s.status_detail, s.iterations, s.final_objective, s.hvp_count, s.grad_count
    );
    if let Some(fit) = &s.rate_fit {
        println!(
            "  slope {:.3} on [{}, {}]",
            fit.slope, fit.window[0], fit.window[1]
        );
    }
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
}

fn parse_window(w: &str) -> Result<(usize, usize)> {
    let (lo, hi) = w.split_once(':').context("window must be LO:HI")?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn fstar_for_trace(
    trace: &Path,
    spec: &str,
    objectives: &[(usize, f64)],
) -> Result<(f64, FStarSource)> {
    if spec != "auto" {
        let v: f64 = spec
            .parse()
            .with_context(|| format!("--fstar '{spec}' is neither a number nor auto"))?;
        return Ok((v, FStarSource::Supplied));
    }
    let summary_path = trace.with_file_name("summary.json");
    if let Ok(text) = std::fs::read_to_string(&summary_path) {
        let summary: RunSummary = serde_json::from_str(&text)
            .with_context(|| format!("reading {}", summary_path.display()))?;
        if let (Some(v), Some(src)) = (summary.f_star, summary.f_star_source) {
            return Ok((v, src));
        }
    }
    let min = objectives
        .iter()
        .map(|&(_, f)| f)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        bail!("trace {} is empty", trace.display());
    }
    Ok((min, FStarSource::TraceMinimum))
}

fn real_main() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = build_config(&args)?;
            let artifacts = run(&cfg)?;
            print_summary(&artifacts.summary);
            Ok(artifacts.exit_code())
        }
        Command::Compare { configs, out } => {
            let loaded = configs
                .iter()
                .map(ExperimentConfig::load)
                .collect::<tensorstep::Result<Vec<_>>>()?;
            let (report, artifacts) = compare(&loaded, out.as_deref())?;
            print!("{}", report.render());
            let stalled = artifacts.iter().any(|a| a.exit_code() == EXIT_STALL);
            Ok(if stalled { EXIT_STALL } else { 0 })
        }
        Command::Fit {
            trace,
            fstar,
            window,
            order,
        } => {
            let rows = read_trace(&trace)?;
            let objectives: Vec<(usize, f64)> = rows.iter().map(|r| (r.k, r.objective)).collect();
            let (f_star, source) = fstar_for_trace(&trace, &fstar, &objectives)?;
            let window = window.as_deref().map(parse_window).transpose()?;
            let fit = fit_rate(&objectives, f_star, source, window, order)?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match real_main() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
