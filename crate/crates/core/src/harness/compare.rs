//! Side-by-side comparison of runs on one problem instance.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_problem, execute, resolve_f_star, write_text, ExperimentConfig, RunArtifacts,
    SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::methods::SolverRun;

pub const COMPARE_TARGETS: [f64; 3] = [1e-4, 1e-6, 1e-8];

/// Cost of one run to reach a target gap; `None` when it never did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub iterations: Option<usize>,
    pub hvp_count: Option<u64>,
    pub grad_count: Option<u64>,
    pub time_s: Option<f64>,
}

/// Labels achieving the minimum of each metric (several on ties, none when
/// no run reached the target or the metric was not recorded).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricWinners {
    pub iterations: Vec<String>,
    pub hvp_count: Vec<String>,
    pub time_s: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetComparison {
    pub target: f64,
    pub entries: Vec<ComparisonEntry>,
    pub winners: MetricWinners,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub problem: String,
    pub labels: Vec<String>,
    pub targets: Vec<TargetComparison>,
}

impl ComparisonReport {
    pub fn at(&self, target: f64) -> Option<&TargetComparison> {
        self.targets.iter().find(|t| t.target == target)
    }

    /// Plain-text table, one block per target.
    pub fn render(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let cell = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let mut out = format!("problem: {}\n", self.problem);
        for t in &self.targets {
            let _ = writeln!(out, "\ngap <= {:e}", t.target);
            let _ = writeln!(
                out,
                "  {:width$}  {:>8}  {:>12}  {:>10}  {:>10}",
                "run", "iters", "hvp", "grads", "time_s"
            );
            for e in &t.entries {
                let _ = writeln!(
                    out,
                    "  {:width$}  {:>8}  {:>12}  {:>10}  {:>10}",
                    e.label,
                    cell(e.iterations.map(|v| v.to_string())),
                    cell(e.hvp_count.map(|v| v.to_string())),
                    cell(e.grad_count.map(|v| v.to_string())),
                    cell(e.time_s.map(|v| format!("{v:.3}"))),
                );
            }
            let list = |w: &[String]| {
                if w.is_empty() {
                    "-".to_string()
                } else {
                    w.join(", ")
                }
            };
            let _ = writeln!(
                out,
                "  winners: iterations [{}], hvp [{}], time [{}]",
                list(&t.winners.iterations),
                list(&t.winners.hvp_count),
                list(&t.winners.time_s)
            );
        }
        out
    }
}

fn argmin<T: PartialOrd + Copy>(
    labels: &[String],
    values: &[Option<T>],
    require_all: bool,
) -> Vec<String> {
    if require_all && values.iter().any(Option::is_none) {
        return Vec::new();
    }
    let best = values
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<T>, v| match acc {
            Some(a) if a <= v => Some(a),
            _ => Some(v),
        });
    match best {
        None => Vec::new(),
        Some(b) => labels
            .iter()
            .zip(values)
            .filter(|(_, v)| **v == Some(b))
            .map(|(l, _)| l.clone())
            .collect(),
    }
}

/// Builds the report from finished runs. Runs must share a problem.
pub fn compare_runs(labels: &[String], runs: &[SolverRun]) -> Result<ComparisonReport> {
    if labels.len() != runs.len() || runs.len() < 2 {
        return Err(Error::contract(
            "compare needs at least two runs, each with a label",
        ));
    }
    let problems: BTreeSet<&str> = runs.iter().map(|r| r.problem.as_str()).collect();
    if problems.len() != 1 {
        return Err(Error::contract(format!(
            "runs are on different problems: {problems:?}"
        )));
    }
    let targets = COMPARE_TARGETS
        .iter()
        .map(|&target| {
            let entries: Vec<ComparisonEntry> = labels
                .iter()
                .zip(runs)
                .map(|(label, run)| {
                    let hit = run.first_reaching(target);
                    ComparisonEntry {
                        label: label.clone(),
                        iterations: hit.map(|r| r.k),
                        hvp_count: hit.map(|r| r.hvp_count),
                        grad_count: hit.map(|r| r.grad_count),
                        time_s: hit.and_then(|r| r.time_s),
                    }
                })
                .collect();
            let iters: Vec<_> = entries.iter().map(|e| e.iterations).collect();
            let hvps: Vec<_> = entries.iter().map(|e| e.hvp_count).collect();
            // Time only counts when every run that reached the target recorded it.
            let times: Vec<_> = entries
                .iter()
                .filter(|e| e.iterations.is_some())
                .map(|e| e.time_s)
                .collect();
            let reached: Vec<String> = entries
                .iter()
                .filter(|e| e.iterations.is_some())
                .map(|e| e.label.clone())
                .collect();
            let winners = MetricWinners {
                iterations: argmin(labels, &iters, false),
                hvp_count: argmin(labels, &hvps, false),
                time_s: argmin(&reached, &times, true),
            };
            TargetComparison {
                target,
                entries,
                winners,
            }
        })
        .collect();
    Ok(ComparisonReport {
        schema_version: SCHEMA_VERSION,
        problem: runs[0].problem.clone(),
        labels: labels.to_vec(),
        targets,
    })
}

/// CSV with one row per iteration index: gap, cumulative Hessian-vector
/// products and time of every run side by side.
pub fn aligned_table(labels: &[String], runs: &[SolverRun]) -> String {
    let max_k = runs
        .iter()
        .filter_map(|r| r.records.last().map(|x| x.k))
        .max()
        .unwrap_or(0);
    let mut out = String::from("k");
    for metric in ["gap", "hvp", "time_s"] {
        for l in labels {
            let _ = write!(out, ",{metric}[{l}]");
        }
    }
    out.push('\n');
    for k in 0..=max_k {
        let rows: Vec<_> = runs
            .iter()
            .map(|r| r.records.iter().find(|x| x.k == k))
            .collect();
        let _ = write!(out, "{k}");
        for r in &rows {
            let _ = write!(
                out,
                ",{}",
                r.and_then(|x| x.gap)
                    .map(|g| format!("{g:e}"))
                    .unwrap_or_default()
            );
        }
        for r in &rows {
            let _ = write!(
                out,
                ",{}",
                r.map(|x| x.hvp_count.to_string()).unwrap_or_default()
            );
        }
        for r in &rows {
            let _ = write!(
                out,
                ",{}",
                r.and_then(|x| x.time_s)
                    .map(|t| format!("{t:e}"))
                    .unwrap_or_default()
            );
        }
        out.push('\n');
    }
    out
}

fn unique_labels(configs: &[ExperimentConfig]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let base = c.display_label();
            if seen.insert(base.clone()) {
                base
            } else {
                format!("{base}#{i}")
            }
        })
        .collect()
}

/// Runs every config (concurrently) and reduces the results into a report.
/// All configs must describe the same problem instance and starting point.
/// When `out` is given, each run is written to `out/<label>/` and the report
/// to `out/comparison.json` plus `out/aligned.csv`.
pub fn compare(
    configs: &[ExperimentConfig],
    out: Option<&Path>,
) -> Result<(ComparisonReport, Vec<RunArtifacts>)> {
    if configs.len() < 2 {
        return Err(Error::contract("compare needs at least two configs"));
    }
    let identity = |c: &ExperimentConfig| {
        (
            c.problem.with_seed(c.seed),
            c.composite,
            c.x0_scale.unwrap_or(1.0),
        )
    };
    let first = identity(&configs[0]);
    for c in &configs[1..] {
        if identity(c) != first {
            return Err(Error::contract(format!(
                "configs describe different problem instances: {:?} vs {:?}",
                first,
                identity(c)
            )));
        }
    }
    // Resolve the reference value once so concurrent runs share the cache entry.
    let problem = build_problem(
        &configs[0].problem,
        configs[0].composite.as_ref(),
        configs[0].seed,
    )?;
    resolve_f_star(&configs[0], &problem)?;

    let labels = unique_labels(configs);
    let results: Vec<Result<RunArtifacts>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .zip(&labels)
            .map(|(c, label)| {
                let mut c = c.clone();
                c.label = Some(label.clone());
                scope.spawn(move || execute(&c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numerical("run thread panicked".into())))
            })
            .collect()
    });
    let artifacts: Vec<RunArtifacts> = results.into_iter().collect::<Result<_>>()?;
    let runs: Vec<SolverRun> = artifacts.iter().map(|a| a.run.clone()).collect();
    let report = compare_runs(&labels, &runs)?;
    if let Some(dir) = out {
        for (a, label) in artifacts.iter().zip(&labels) {
            a.write(&dir.join(sanitize(label)))?;
        }
        write_text(
            &dir.join("comparison.json"),
            &serde_json::to_string_pretty(&report)?,
        )?;
        write_text(&dir.join("aligned.csv"), &aligned_table(&labels, &runs))?;
    }
    Ok((report, artifacts))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::{MethodKind, RunStatus, TraceRecord};
    use nalgebra::DVector;

    fn fake_run(problem: &str, gaps: &[f64], hvp_step: u64) -> SolverRun {
        let records = gaps
            .iter()
            .enumerate()
            .map(|(k, &g)| TraceRecord {
                k,
                objective: g,
                gap: Some(g),
                delta_requested: None,
                delta_certified: None,
                h_used: None,
                inner_iterations: 0,
                grad_norm: 0.0,
                hvp_count: hvp_step * k as u64,
                grad_count: k as u64,
                dist_to_opt: None,
                accepted: true,
                time_s: None,
            })
            .collect();
        SolverRun {
            method: MethodKind::MonotoneII,
            problem: problem.into(),
            records,
            status: RunStatus::MaxIterations,
            x_final: DVector::zeros(1),
            f_star: Some(0.0),
        }
    }

    #[test]
    fn winners_per_metric() {
        let fast_iter = fake_run("p", &[1.0, 1e-5, 1e-7, 1e-9], 100);
        let cheap = fake_run("p", &[1.0, 1e-3, 1e-5, 1e-7, 1e-9], 10);
        let labels = vec!["a".to_string(), "b".to_string()];
        let rep = compare_runs(&labels, &[fast_iter, cheap]).unwrap();
        let t8 = rep.at(1e-8).unwrap();
        assert_eq!(t8.winners.iterations, vec!["a"]);
        assert_eq!(t8.winners.hvp_count, vec!["b"]);
        assert!(t8.winners.time_s.is_empty());
        assert_eq!(t8.entries[0].iterations, Some(3));
        assert_eq!(t8.entries[1].hvp_count, Some(40));
        assert!(rep.render().contains("gap <= 1e-8"));
    }

    #[test]
    fn identical_runs_tie_and_mismatch_is_rejected() {
        let a = fake_run("p", &[1.0, 1e-9], 5);
        let labels = vec!["x".to_string(), "y".to_string()];
        let rep = compare_runs(&labels, &[a.clone(), a.clone()]).unwrap();
        for t in &rep.targets {
            assert_eq!(t.winners.iterations.len(), 2);
            assert_eq!(t.winners.hvp_count.len(), 2);
        }
        let other = fake_run("q", &[1.0, 1e-9], 5);
        assert!(matches!(
            compare_runs(&labels, &[a, other]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unreached_target_has_no_winner() {
        let a = fake_run("p", &[1.0, 1e-3], 5);
        let labels = vec!["x".to_string(), "y".to_string()];
        let rep = compare_runs(&labels, &[a.clone(), a]).unwrap();
        assert!(rep.at(1e-4).unwrap().winners.iterations.is_empty());
    }

    #[test]
    fn aligned_table_shape() {
        let a = fake_run("p", &[1.0, 0.5], 5);
        let b = fake_run("p", &[1.0], 5);
        let t = aligned_table(&["a".into(), "b".into()], &[a, b]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(
            lines[0],
            "k,gap[a],gap[b],hvp[a],hvp[b],time_s[a],time_s[b]"
        );
        assert_eq!(lines[2], "1,5e-1,,5,,,");
    }
}
