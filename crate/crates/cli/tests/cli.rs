use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mscale(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscale"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("MSCALE_SEED")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn generate(dir: &Path, system: &str) {
    let out = mscale(&["generate", "--system", system, "--n-trajectories", "20", "--out-dir", "."], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn fit_pu(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fit", "--method", "pu", "--data", "sin_exp.csv", "--epochs", "5", "--out-dir", "."];
    args.extend_from_slice(extra);
    mscale(&args, dir)
}

#[test]
fn generate_is_deterministic_and_records_parameters() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(code(&mscale(&["generate", "--system", "duffing", "--seed", "7", "--out-dir", "."], d)), 0);
    }
    assert_eq!(std::fs::read(a.path().join("duffing.csv")).unwrap(), std::fs::read(b.path().join("duffing.csv")).unwrap());
    assert_eq!(code(&mscale(&["generate", "--system", "two_freq", "--out-dir", "."], a.path())), 0);
    let meta = json(&a.path().join("two_freq.meta.json"));
    for name in ["A", "c", "k", "const"] {
        assert!(meta["system"]["parameters"][name].is_number(), "missing {name}: {meta}");
    }
    let header = std::fs::read_to_string(a.path().join("duffing.csv")).unwrap();
    assert!(header.starts_with("x0,x1,dx0,dx1\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&mscale(&["generate", "--system", "nope", "--out-dir", "."], d)), 2);
    assert_eq!(code(&mscale(&["generate", "--system", "sin_exp", "--out-dir", "missing/dir"], d)), 3);
    assert_eq!(code(&mscale(&["frobnicate"], d)), 2);
    generate(d, "sin_exp");
    assert_eq!(code(&fit_pu(d, &["--learning-rate", "1e300"])), 4);
    assert_eq!(code(&mscale(&["fit", "--method", "magic", "--data", "sin_exp.csv", "--out-dir", "."], d)), 2);
    assert_eq!(code(&mscale(&["fit", "--method", "pu", "--data", "absent.csv", "--out-dir", "."], d)), 2);
    std::fs::write(d.join("bad.csv"), "x,dxdt\n1.0,abc\n").unwrap();
    assert_eq!(code(&mscale(&["fit", "--method", "pu", "--data", "bad.csv", "--system", "sin_exp", "--out-dir", "."], d)), 2);
    assert_eq!(code(&mscale(&["rollout", "--model", "absent.json", "--out-dir", "."], d)), 2);
    assert_eq!(code(&mscale(&["components", "--model", "absent.json", "--out-dir", "."], d)), 2);
}

#[test]
fn flags_override_config_and_env_seed_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "sin_exp");
    std::fs::write(d.join("cfg.json"), r#"{"seed": 3, "epochs": 5, "method": "pu"}"#).unwrap();
    let out = mscale(&["--config", "cfg.json", "fit", "--data", "sin_exp.csv", "--out-dir", ".", "--seed", "9"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&d.join("report.json"));
    assert_eq!(report["config"]["seed"], 9);
    assert_eq!(report["config"]["train"]["epochs"], 5);

    let out = mscale(&["--config", "cfg.json", "fit", "--data", "sin_exp.csv", "--out-dir", "."], d);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&d.join("report.json"))["config"]["seed"], 3);

    let out = Command::new(env!("CARGO_BIN_EXE_mscale"))
        .args(["fit", "--method", "pu", "--data", "sin_exp.csv", "--epochs", "5", "--out-dir", "."])
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("MSCALE_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(json(&d.join("report.json"))["config"]["seed"], 42);

    std::fs::write(d.join("bad_cfg.json"), r#"{"sede": 3}"#).unwrap();
    assert_eq!(code(&mscale(&["--config", "bad_cfg.json", "fit", "--data", "sin_exp.csv", "--out-dir", "."], d)), 2);
}

#[test]
fn evaluate_reproduces_report_and_writes_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "sin_exp");
    assert_eq!(code(&fit_pu(d, &[])), 0);
    let out = mscale(&["evaluate", "--model", "model.json", "--data", "sin_exp.csv", "--out-dir", "."], d);
    assert_eq!(code(&out), 0);
    let report = json(&d.join("report.json"));
    let metrics = json(&d.join("metrics.json"));
    assert_eq!(report["test_mse"].as_f64().unwrap().to_bits(), metrics["test_mse"].as_f64().unwrap().to_bits());
    for (key, check) in [
        ("method", Value::is_string as fn(&Value) -> bool),
        ("model", Value::is_string),
        ("data", Value::is_string),
        ("n_test", Value::is_u64),
        ("test_mse", Value::is_f64),
        ("test_relative_loss", Value::is_f64),
        ("residuals", Value::is_string),
        ("version", Value::is_u64),
    ] {
        assert!(check(&metrics[key]), "metrics.{key} has wrong type: {metrics}");
    }
    assert_eq!(metrics.as_object().unwrap().len(), 8);
    let residuals = std::fs::read_to_string(d.join("residuals.csv")).unwrap();
    assert!(residuals.starts_with("x,dxdt,prediction,residual\n"));
    assert_eq!(residuals.lines().count() as u64, metrics["n_test"].as_u64().unwrap() + 1);

    std::fs::write(d.join("one.csv"), "x,dxdt\n1.0,2.0\n").unwrap();
    assert_eq!(code(&mscale(&["evaluate", "--model", "model.json", "--data", "one.csv", "--out-dir", "."], d)), 2);
}

#[test]
fn components_file_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "sin_exp");
    assert_eq!(code(&fit_pu(d, &["--max-modes", "1"])), 0);
    std::fs::create_dir(d.join("pu")).unwrap();
    assert_eq!(code(&mscale(&["components", "--model", "model.json", "--out-dir", "pu"], d)), 0);
    let csvs = |sub: &str| {
        let mut v: Vec<String> = std::fs::read_dir(d.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(csvs("pu"), ["mode_1_macro.csv", "mode_1_micro.csv"]);

    let micro = std::fs::read_to_string(d.join("pu/mode_1_micro.csv")).unwrap();
    let coords: Vec<f64> = micro.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    // sin_exp defaults to a single macro element spanning [0, 10].
    let h = 10.0;
    assert!((coords[0] + h).abs() < 1e-9 && (coords[coords.len() - 1] - h).abs() < 1e-9, "{coords:?}");

    std::fs::create_dir(d.join("svdfit")).unwrap();
    let out = mscale(&["fit", "--method", "svd", "--data", "sin_exp.csv", "--modes", "3", "--out-dir", "svdfit"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::create_dir(d.join("svd")).unwrap();
    assert_eq!(code(&mscale(&["components", "--model", "svdfit/model.json", "--out-dir", "svd"], d)), 0);
    let files = csvs("svd");
    assert_eq!(files.iter().filter(|f| f.ends_with("_micro.csv")).count(), 3);
    assert_eq!(files.iter().filter(|f| f.ends_with("_macro.csv")).count(), 3);
    assert!(files.contains(&"singular_values.csv".to_string()));
}

#[test]
fn rollout_of_truth_has_zero_error_and_checks_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = mscale(&["rollout", "--model", "truth", "--system", "duffing", "--out-dir", "."], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&d.join("rollout.json"));
    assert_eq!(summary["relative_l2"].as_f64(), Some(0.0));
    assert_eq!(code(&mscale(&["rollout", "--model", "truth", "--system", "duffing", "--x0", "0.5", "--out-dir", "."], d)), 2);
}

#[test]
fn negative_initial_condition_ranges_parse() {
    let dir = tempfile::tempdir().unwrap();
    let out = mscale(
        &["generate", "--system", "duffing", "--n-trajectories", "3", "--ic-range", "-1.5:1.5", "--ic-range", "-1:-0.5", "--out-dir", "."],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
