use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tensorstep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tensorstep"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_with_flags_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = tensorstep(
        &[
            "run",
            "--problem",
            "logsumexp:n=10,m=60,mu=0.2",
            "--method",
            "monotone1",
            "--H",
            "fixed:1",
            "--policy",
            "power:1:3",
            "--subsolver",
            "exact",
            "--max-iters",
            "500",
            "--target-gap",
            "1e-8",
            "--seed",
            "3",
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "trace.csv", "summary.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["status"], "target_reached");
    assert!(summary["final_gap"].as_f64().unwrap() <= 1e-8);

    // The written config replays to the same trace.
    let again = tensorstep(
        &["run", "--config", "out/config.json", "--out", "again"],
        dir.path(),
    );
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(
        fs::read(dir.path().join("out/trace.csv")).unwrap(),
        fs::read(dir.path().join("again/trace.csv")).unwrap()
    );

    let fit = tensorstep(
        &[
            "fit",
            "--trace",
            "out/trace.csv",
            "--fstar",
            "auto",
            "--window",
            "2:40",
        ],
        dir.path(),
    );
    assert!(fit.status.success(), "{}", stderr(&fit));
    let fit: serde_json::Value = serde_json::from_str(&stdout(&fit)).unwrap();
    assert_eq!(fit["f_star_source"], "known");
    assert!(fit["slope"].as_f64().unwrap() < 0.0);
}

#[test]
fn compare_two_configs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, policy) in [("a", "adaptive:1:1"), ("b", "constant:1e-8")] {
        let o = tensorstep(
            &[
                "run",
                "--problem",
                "logsumexp:n=10,m=60,mu=0.2",
                "--method",
                "monotone2",
                "--H",
                "fixed:1",
                "--policy",
                policy,
                "--subsolver",
                "fgm",
                "--max-iters",
                "300",
                "--target-gap",
                "1e-8",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = tensorstep(
        &[
            "compare",
            "--configs",
            "a/config.json",
            "b/config.json",
            "--out",
            "cmp",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1e-8"), "{}", stdout(&o));
    assert!(dir.path().join("cmp/comparison.json").exists());
    assert!(dir.path().join("cmp/aligned.csv").exists());
}

#[test]
fn compare_rejects_different_problems() {
    let dir = tempfile::tempdir().unwrap();
    for (name, problem) in [
        ("a", "logsumexp:n=5,m=30,mu=0.2"),
        ("b", "logsumexp:n=6,m=30,mu=0.2"),
    ] {
        let o = tensorstep(
            &[
                "run",
                "--problem",
                problem,
                "--method",
                "monotone2",
                "--max-iters",
                "2",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = tensorstep(
        &["compare", "--configs", "a/config.json", "b/config.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different problem"), "{}", stderr(&o));
}

#[test]
fn subsolver_stall_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tensorstep(
        &[
            "run",
            "--problem",
            "logsumexp:n=10,m=60,mu=0.05",
            "--method",
            "monotone2",
            "--max-iters",
            "1",
            "--out",
            "seed",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("seed/config.json")).unwrap())
            .unwrap();
    cfg["solver"]["policy"] = "constant:1e-14".into();
    cfg["solver"]["subsolver"] = "fgm:bound".into();
    cfg["solver"]["fgm_max_iterations"] = 1.into();
    cfg["solver"]["max_iterations"] = 5.into();
    cfg["output_dir"] = "stall".into();
    fs::write(dir.path().join("stall.json"), cfg.to_string()).unwrap();
    let o = tensorstep(&["run", "--config", "stall.json"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}{}", stdout(&o), stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stall/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["exit_code"], 2);
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &[
            "run",
            "--problem",
            "logsumexp:n=5,m=30",
            "--method",
            "monotone2",
        ],
        &[
            "run",
            "--problem",
            "nosuch:n=5",
            "--method",
            "monotone2",
            "--out",
            "x",
        ],
        &[
            "run",
            "--problem",
            "chain:n=5,q=3,c=1",
            "--method",
            "monotone2",
            "--policy",
            "power:1",
            "--out",
            "x",
        ],
        &[
            "run",
            "--problem",
            "chain:n=5,q=3,c=1",
            "--method",
            "monotone2",
            "--subsolver",
            "exact",
            "--stop",
            "bound",
            "--out",
            "x",
        ],
        &["run", "--config", "missing.json"],
        &["fit", "--trace", "missing.csv"],
    ];
    for args in cases {
        let o = tensorstep(args, dir.path());
        assert_ne!(o.status.code(), Some(0), "{args:?} should fail");
        assert!(!stderr(&o).is_empty(), "{args:?}");
    }
}
