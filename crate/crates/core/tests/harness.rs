use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use tensorstep::accel::{accelerated_method, AccelConfig};
use tensorstep::harness::{
    compare, execute, fit_rate, fit_rate_records, read_trace, run, ExperimentConfig, FStarSource,
    ProblemSpec, RunSummary, TRACE_COLUMNS,
};
use tensorstep::methods::{
    monotone_method_i, monotone_method_ii, HMode, MethodKind, RunStatus, SolverConfig,
};
use tensorstep::policies::AccuracyPolicy;
use tensorstep::problems::{
    shifted_logsumexp_instance, CompositePart, ProblemInstance, SmoothOracle,
};
use tensorstep::subsolvers::{StopRule, SubsolverKind};
use tensorstep::Error;

fn fgm() -> SubsolverKind {
    SubsolverKind::Fgm {
        stop: StopRule::Bound,
    }
}

fn lse(n: usize, m: usize, mu: f64) -> ProblemSpec {
    ProblemSpec::Logsumexp {
        n,
        m,
        mu,
        seed: None,
    }
}

fn config(
    problem: ProblemSpec,
    method: MethodKind,
    solver: SolverConfig,
    dir: &Path,
) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(problem, method, solver);
    c.seed = 5;
    c.fstar_cache_dir = Some(dir.join("cache"));
    c
}

#[test]
fn monotone1_reaches_target_on_logsumexp() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(
        lse(100, 600, 0.05),
        MethodKind::MonotoneI,
        SolverConfig {
            h_mode: HMode::Fixed { h: 1.0 },
            policy: "power:1:3".parse().unwrap(),
            subsolver: SubsolverKind::Exact,
            max_iterations: 5000,
            target_gap: Some(1e-8),
            ..SolverConfig::default()
        },
        dir.path(),
    );
    cfg.output_dir = Some(dir.path().join("out"));
    let art = run(&cfg).unwrap();
    assert!(
        matches!(art.run.status, RunStatus::TargetReached),
        "{:?}",
        art.run.status
    );
    assert_eq!(art.exit_code(), 0);
    let rows = read_trace(&dir.path().join("out/trace.csv")).unwrap();
    assert!(rows.windows(2).all(|w| w[1].objective <= w[0].objective));
    assert!(rows.last().unwrap().gap.unwrap() <= 1e-8);
    assert_eq!(art.summary.f_star_source, Some(FStarSource::Known));
}

#[test]
fn written_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = config(
        lse(10, 60, 0.5),
        MethodKind::MonotoneII,
        SolverConfig {
            h_mode: HMode::Fixed { h: 1.0 },
            policy: "adaptive:1:1".parse().unwrap(),
            subsolver: fgm(),
            max_iterations: 12,
            ..SolverConfig::default()
        },
        dir.path(),
    );
    cfg.output_dir = Some(out.clone());
    let art = run(&cfg).unwrap();

    let header = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), TRACE_COLUMNS.join(","));

    let reloaded = ExperimentConfig::load(out.join("config.json")).unwrap();
    assert_eq!(reloaded, art.config);
    assert_eq!(
        reloaded.to_json().unwrap().trim_end(),
        fs::read_to_string(out.join("config.json"))
            .unwrap()
            .trim_end()
    );

    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.iterations, art.run.records.len() - 1);
    assert_eq!(summary.hvp_count, art.run.records.last().unwrap().hvp_count);
    assert_eq!(summary.schema_version, tensorstep::harness::SCHEMA_VERSION);
}

#[test]
fn repeat_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(
        ProblemSpec::Logistic {
            n: 8,
            m: 60,
            l2: 0.05,
            seed: None,
        },
        MethodKind::Averaging,
        SolverConfig {
            h_mode: HMode::Fixed { h: 2.0 },
            policy: "power:1:3".parse().unwrap(),
            subsolver: fgm(),
            max_iterations: 10,
            ..SolverConfig::default()
        },
        dir.path(),
    );
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        cfg.output_dir = Some(dir.path().join(name));
        run(&cfg).unwrap();
        bytes.push((
            fs::read(dir.path().join(name).join("trace.csv")).unwrap(),
            fs::read(dir.path().join(name).join("summary.json")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);

    // A different seed draws a different instance.
    cfg.seed = 6;
    cfg.output_dir = Some(dir.path().join("c"));
    run(&cfg).unwrap();
    assert_ne!(
        fs::read(dir.path().join("c/trace.csv")).unwrap(),
        bytes[0].0
    );
}

#[test]
fn every_method_emits_the_same_columns_and_leaves_absent_values_empty() {
    let dir = tempfile::tempdir().unwrap();
    for method in [
        MethodKind::MonotoneI,
        MethodKind::MonotoneII,
        MethodKind::Averaging,
        MethodKind::Accelerated,
    ] {
        let mut cfg = config(
            "chain:n=6,q=3,c=1".parse().unwrap(),
            method,
            SolverConfig {
                h_mode: HMode::Fixed { h: 2.0 },
                subsolver: fgm(),
                max_iterations: 4,
                ..SolverConfig::default()
            },
            dir.path(),
        );
        let out = dir.path().join(method.name());
        cfg.output_dir = Some(out.clone());
        run(&cfg).unwrap();
        let text = fs::read_to_string(out.join("trace.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        // Row k = 0 has no step, so its step columns are empty; time_s is
        // empty unless wall time is requested.
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), TRACE_COLUMNS.len());
        assert_eq!(first[0], "0");
        assert_eq!(first[3], "", "{method:?}");
        assert_eq!(first[9], "");
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), TRACE_COLUMNS.len());
            assert!(!cells[3].is_empty(), "{method:?}: {line}");
        }
    }
}

#[test]
fn logistic_line_search_records_h_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        ProblemSpec::Logistic {
            n: 20,
            m: 200,
            l2: 1e-3,
            seed: None,
        },
        MethodKind::MonotoneII,
        SolverConfig {
            h_mode: HMode::LineSearch { h0: 1.0 },
            policy: "adaptive:1:1".parse().unwrap(),
            subsolver: fgm(),
            max_iterations: 15,
            ..SolverConfig::default()
        },
        dir.path(),
    );
    let art = execute(&cfg).unwrap();
    let hs: Vec<f64> = art.run.records[1..]
        .iter()
        .map(|r| r.h_used.unwrap())
        .collect();
    assert_eq!(hs.len(), art.run.records.len() - 1);
    assert!(hs.iter().all(|h| h.is_finite() && *h > 0.0));
    assert!(
        hs.windows(2).any(|w| w[0] != w[1]),
        "line search never moved H: {hs:?}"
    );
    assert_eq!(art.summary.f_star_source, Some(FStarSource::ReferenceRun));
}

#[test]
fn missing_libsvm_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        ProblemSpec::Libsvm {
            path: dir.path().join("absent.svm"),
            l2: 0.1,
        },
        MethodKind::MonotoneII,
        SolverConfig::default(),
        dir.path(),
    );
    assert!(matches!(execute(&cfg), Err(Error::Io { .. })));
}

#[test]
fn libsvm_file_runs_with_cached_reference() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.svm");
    fs::write(
        &path,
        "+1 1:0.5 3:1\n-1 2:1 3:-0.5\n+1 1:1 2:0.25\n-1 1:-1 3:0.75\n+1 2:-0.5 3:1\n",
    )
    .unwrap();
    let cfg = config(
        ProblemSpec::Libsvm { path, l2: 0.1 },
        MethodKind::MonotoneII,
        SolverConfig {
            h_mode: HMode::LineSearch { h0: 1.0 },
            max_iterations: 30,
            ..SolverConfig::default()
        },
        dir.path(),
    );
    let first = execute(&cfg).unwrap();
    let cached = fs::read_dir(dir.path().join("cache")).unwrap().count();
    assert_eq!(cached, 1);
    let second = execute(&cfg).unwrap();
    assert_eq!(first.summary.f_star, second.summary.f_star);
    assert!(first.summary.final_gap.unwrap() <= 1e-10);
}

#[test]
fn identical_configs_tie_on_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        lse(10, 60, 0.2),
        MethodKind::MonotoneII,
        SolverConfig {
            h_mode: HMode::Fixed { h: 1.0 },
            policy: "power:1:2".parse().unwrap(),
            subsolver: fgm(),
            max_iterations: 200,
            target_gap: Some(1e-8),
            ..SolverConfig::default()
        },
        dir.path(),
    );
    let (report, _) = compare(&[cfg.clone(), cfg], Some(&dir.path().join("cmp"))).unwrap();
    assert_eq!(report.labels.len(), 2);
    assert_ne!(report.labels[0], report.labels[1]);
    for t in &report.targets {
        if t.entries[0].iterations.is_some() {
            assert_eq!(t.winners.iterations.len(), 2);
            assert_eq!(t.winners.hvp_count.len(), 2);
        }
    }
    assert!(dir.path().join("cmp/comparison.json").exists());
    assert!(dir.path().join("cmp/aligned.csv").exists());
}

#[test]
fn compare_rejects_mismatched_instances() {
    let dir = tempfile::tempdir().unwrap();
    let solver = SolverConfig {
        max_iterations: 3,
        subsolver: fgm(),
        ..SolverConfig::default()
    };
    let a = config(
        lse(10, 60, 0.2),
        MethodKind::MonotoneII,
        solver.clone(),
        dir.path(),
    );
    let mut b = a.clone();
    b.problem = lse(10, 60, 0.3);
    assert!(matches!(
        compare(&[a.clone(), b], None),
        Err(Error::Contract(_))
    ));
    let mut c = a.clone();
    c.seed = 99;
    assert!(matches!(
        compare(&[a.clone(), c], None),
        Err(Error::Contract(_))
    ));
    let mut d = a.clone();
    d.x0_scale = Some(0.5);
    assert!(matches!(
        compare(&[a.clone(), d], None),
        Err(Error::Contract(_))
    ));
    assert!(matches!(compare(&[a], None), Err(Error::Contract(_))));
}

#[test]
fn compare_accelerated_against_monotone2_on_chain() {
    let dir = tempfile::tempdir().unwrap();
    let solver = SolverConfig {
        h_mode: HMode::Fixed { h: 1.0 },
        subsolver: fgm(),
        max_iterations: 250,
        target_gap: Some(1e-6),
        ..SolverConfig::default()
    };
    let acc = config(
        "chain:n=20,q=3,c=1".parse().unwrap(),
        MethodKind::Accelerated,
        solver.clone(),
        dir.path(),
    );
    let mut mono = acc.clone();
    mono.method = MethodKind::MonotoneII;
    mono.solver.policy = AccuracyPolicy::power(1.0, 3.0).unwrap();
    let (report, _) = compare(&[acc, mono], None).unwrap();
    let at = report.at(1e-6).unwrap();
    let (a, m) = (
        at.entries[0].iterations.unwrap(),
        at.entries[1].iterations.unwrap(),
    );
    assert!(a < m, "accelerated {a} vs monotone2 {m}");
    assert_eq!(at.winners.iterations, vec![report.labels[0].clone()]);
}

#[test]
fn monotone1_slope_on_logsumexp() {
    let problem = shifted_logsumexp_instance(50, 300, 1.0, 0).unwrap();
    let x0 = &problem.x0 * 0.05;
    let problem = problem.with_x0(x0).unwrap();
    let run = monotone_method_i(
        &problem,
        &SolverConfig {
            h_mode: HMode::Fixed { h: 4.0 },
            policy: AccuracyPolicy::power(1.0, 3.0).unwrap(),
            subsolver: SubsolverKind::Exact,
            max_iterations: 80,
            ..SolverConfig::default()
        },
    )
    .unwrap();
    let f_star = problem.optimal_value().unwrap();
    let fit =
        fit_rate_records(&run.records, f_star, FStarSource::Known, Some((10, 80)), 2).unwrap();
    assert!(fit.slope <= -1.7, "slope {} on {:?}", fit.slope, fit.window);
}

#[test]
fn accelerated_slope_on_chain() {
    let problem = tensorstep::problems::powered_chain_instance(20, 3.0, 1.0).unwrap();
    let base = SolverConfig {
        h_mode: HMode::Fixed { h: 1.0 },
        subsolver: fgm(),
        max_iterations: 60,
        ..SolverConfig::default()
    };
    let run = accelerated_method(&problem, &base, &AccelConfig::default()).unwrap();
    let f_star = problem.optimal_value().unwrap();
    let fit = fit_rate_records(&run.records, f_star, FStarSource::Known, Some((5, 60)), 2).unwrap();
    assert!(fit.slope <= -2.5, "slope {}", fit.slope);
}

#[test]
fn fit_of_exact_power_law() {
    let pts: Vec<(usize, f64)> = (1..=100).map(|k| (k, 3.0 + 1.0 / (k * k) as f64)).collect();
    let fit = fit_rate(&pts, 3.0, FStarSource::Supplied, None, 2).unwrap();
    assert!((fit.slope + 2.0).abs() < 1e-6);
}

/// Independent counter around the log-sum-exp oracle that hides its dense
/// Hessian, so all curvature goes through Hessian-vector products.
struct Tally {
    inner: Arc<dyn SmoothOracle>,
    grads: AtomicU64,
    hvps: AtomicU64,
}

impl SmoothOracle for Tally {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.inner.value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.grads.fetch_add(1, Ordering::SeqCst);
        self.inner.gradient(x)
    }
    fn value_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self.grads.fetch_add(1, Ordering::SeqCst);
        self.inner.value_gradient(x)
    }
    fn hessian_vec(&self, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        self.hvps.fetch_add(1, Ordering::SeqCst);
        self.inner.hessian_vec(x, h)
    }
    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn lipschitz(&self, p: u32) -> Option<f64> {
        self.inner.lipschitz(p)
    }
}

#[test]
fn oracle_counts_match_an_independent_tally() {
    let base = shifted_logsumexp_instance(12, 80, 0.3, 1).unwrap();
    let tally = Arc::new(Tally {
        inner: base.smooth.clone(),
        grads: AtomicU64::new(0),
        hvps: AtomicU64::new(0),
    });
    let problem = ProblemInstance::new(
        "tally",
        tally.clone() as Arc<dyn SmoothOracle>,
        Arc::new(CompositePart::Zero),
        (*base.norm).clone(),
        base.x0.clone(),
    )
    .unwrap();
    let run = monotone_method_ii(
        &problem,
        &SolverConfig {
            h_mode: HMode::Fixed { h: 1.0 },
            policy: "adaptive:1:1".parse().unwrap(),
            subsolver: fgm(),
            max_iterations: 10,
            ..SolverConfig::default()
        },
    )
    .unwrap();
    let last = run.records.last().unwrap();
    assert_eq!(last.hvp_count, tally.hvps.load(Ordering::SeqCst));
    assert_eq!(last.grad_count, tally.grads.load(Ordering::SeqCst));
    assert!(last.hvp_count > 0);
}
