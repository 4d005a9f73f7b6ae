use std::fs;
use std::process::Command;

use stosqp::experiment::{run_experiment, trace_header, ExperimentConfig};

fn small_config(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        iters: 2000,
        thin: 10,
        seeds: vec![4, 5],
        beta_warmup: 500.0,
        validate: true,
        out: out.to_path_buf(),
        ..Default::default()
    }
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn experiment_writes_traces_summary_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.summaries.len(), 2);
    for name in ["config.json", "reference.json", "columns.txt", "summary.json", "trace_seed4.csv", "trace_seed5.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let a = fs::read_to_string(dir.path().join("trace_seed4.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("trace_seed5.csv")).unwrap();
    assert_eq!(a.lines().next().unwrap(), trace_header(&cfg.eps));
    assert_eq!(a.lines().count() - 1, cfg.iters / cfg.thin);
    assert_ne!(column(&a, "dist_y"), column(&b, "dist_y"));
    // the first row of every replicate starts from the same x_1
    assert_eq!(column(&a, "dist_x")[0], column(&b, "dist_x")[0]);
    let ks = column(&a, "k");
    assert_eq!(ks[1] - ks[0], 10.0);
    // 17 significant digits
    let first = a.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    assert_eq!(first.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
    for s in &report.summaries {
        assert_eq!(s.triangle_failures, 0);
        assert!(s.final_dist_x >= 0.0 && s.final_dist_y_avg >= 0.0);
    }
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["iters"], 2000);
    assert_eq!(echo["instance"]["num_features"], 40);
}

#[test]
fn exact_gradients_give_identical_multiplier_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        exact_gradients: true,
        seeds: vec![1],
        iters: 500,
        ..small_config(dir.path())
    };
    run_experiment(&cfg).unwrap();
    let t = fs::read_to_string(dir.path().join("trace_seed1.csv")).unwrap();
    assert_eq!(column(&t, "dist_y"), column(&t, "dist_y_true"));
}

#[test]
fn reference_only_skips_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        reference_only: true,
        ..small_config(dir.path())
    };
    let report = run_experiment(&cfg).unwrap();
    assert!(report.summaries.is_empty());
    assert!(report.reference.residual <= 1e-8);
    assert!(report.reference.second_order.passed);
    assert!(!dir.path().join("trace_seed4.csv").exists());
}

#[test]
fn sequential_and_parallel_replicates_agree() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut cfg = small_config(d1.path());
    cfg.iters = 300;
    cfg.execution = stosqp::Execution::Sequential;
    run_experiment(&cfg).unwrap();
    cfg.out = d2.path().to_path_buf();
    cfg.execution = stosqp::Execution::Parallel;
    run_experiment(&cfg).unwrap();
    for f in ["trace_seed4.csv", "trace_seed5.csv"] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
    }
}

#[test]
fn cli_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "iters = 50000\nthin = 5\nbatch = 8\nseed = 9\n").unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_stosqp"))
        .args(["--config", conf.to_str().unwrap(), "--iters", "100", "--seed", "3", "--eps", "0.5", "--out"])
        .arg(&out)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["iters"], 100);
    assert_eq!(echo["config"]["batch"], 8);
    assert_eq!(echo["config"]["seeds"], serde_json::json!([3]));
    let t = fs::read_to_string(out.join("trace_seed3.csv")).unwrap();
    assert_eq!(t.lines().count() - 1, 20);
    assert!(t.lines().next().unwrap().contains("dist_y_avg_eps_0.5"));
    // without --validate the true-gradient columns are nan
    assert!(column(&t, "dist_y_true").iter().all(|v| v.is_nan()));
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_stosqp"))
        .args(["--beta-p", "0.3", "--out"])
        .arg(dir.path())
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_stosqp"))
        .args(["--dataset", "/nonexistent/file.svm", "--out"])
        .arg(dir.path())
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(1));
}
