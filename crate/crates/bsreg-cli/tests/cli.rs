//! End-to-end tests of the bsreg binary: CSV in, JSON/CSV out, exit codes.

use bsreg::model::{BuiltinModel, MeanModel};
use bsreg::signorm::SinhNormalParams;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::{Command, Output};

fn bsreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Simulated Michaelis-Menten dataset written as CSV with header y,x.
fn write_mm_csv(path: &Path, n: usize, seed: u64) {
    let model = MeanModel::builtin(BuiltinModel::MichaelisMenten);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 1));
    for i in 0..n {
        x[[i, 0]] = 0.05 + 0.95 * rng.random::<f64>();
    }
    let mu = model.eval_mu(&x, &[3.0, 0.5]).unwrap();
    let noise = SinhNormalParams::new(0.5, 0.0, 2.0).unwrap();
    let eps = noise.sample(&mut rng, n);
    let mut csv = String::from("y,x\n");
    for i in 0..n {
        csv.push_str(&format!("{},{}\n", mu[i] + eps[i], x[[i, 0]]));
    }
    std::fs::write(path, csv).unwrap();
}

#[test]
fn fit_emits_a_versioned_json_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mm.csv");
    write_mm_csv(&data, 40, 101);
    let out = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        "3,0.5",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert_eq!(report["schema"], "bsreg-fit/1");
    assert_eq!(report["converged"], true);
    assert_eq!(report["n"], 40);
    assert_eq!(report["params"][0], "eta");
    assert!(report["mle"]["beta"][0].as_f64().unwrap() > 0.0);
    assert!(report["mle"]["se_beta"][1].as_f64().unwrap() > 0.0);
    let corrected = &report["corrected"];
    assert!(corrected["alpha"].as_f64().unwrap() > 0.0);
    assert_eq!(corrected["alpha_nonpositive"], false);
    // corrected alpha exceeds the MLE (the alpha bias is always negative)
    assert!(
        corrected["alpha"].as_f64().unwrap() > report["mle"]["alpha"].as_f64().unwrap()
    );
    assert_eq!(report["mu"]["bias"].as_array().unwrap().len(), 40);
    assert_eq!(report["mu"]["var"].as_array().unwrap().len(), 40);
}

#[test]
fn refit_from_the_reported_optimum_converges_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mm.csv");
    write_mm_csv(&data, 35, 102);
    let first = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        "3,0.5",
    ]);
    assert_eq!(first.status.code(), Some(0));
    let r1: serde_json::Value = serde_json::from_str(&stdout_str(&first)).unwrap();
    let beta = r1["mle"]["beta"].as_array().unwrap();
    let start = format!(
        "{},{}",
        beta[0].as_f64().unwrap(),
        beta[1].as_f64().unwrap()
    );
    let second = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        &start,
    ]);
    assert_eq!(second.status.code(), Some(0));
    let r2: serde_json::Value = serde_json::from_str(&stdout_str(&second)).unwrap();
    assert!(r2["iterations"].as_u64().unwrap() <= 2, "iterations: {}", r2["iterations"]);
    for j in 0..2 {
        let a = r1["mle"]["beta"][j].as_f64().unwrap();
        let b = r2["mle"]["beta"][j].as_f64().unwrap();
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "beta[{j}]: {a} vs {b}");
    }
    let a1 = r1["mle"]["alpha"].as_f64().unwrap();
    let a2 = r2["mle"]["alpha"].as_f64().unwrap();
    assert!((a1 - a2).abs() <= 1e-10 * (1.0 + a1));
}

#[test]
fn residual_table_has_one_consistent_row_per_observation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mm.csv");
    write_mm_csv(&data, 25, 103);
    let args_tail = [
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        "3,0.5",
    ];
    let fit_out = bsreg(&[&["fit"], &args_tail[..]].concat());
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&fit_out)).unwrap();
    let alpha = report["mle"]["alpha"].as_f64().unwrap();

    let out = bsreg(&[&["residuals"], &args_tail[..]].concat());
    assert_eq!(out.status.code(), Some(0));
    let table = stdout_str(&out);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("index,y,mu_hat,eps_hat,r_hat"));
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 25);
    for (k, row) in rows.iter().enumerate() {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, k + 1);
        assert!((f[3] - (f[1] - f[2])).abs() < 1e-10);
        let want = 2.0 / alpha * (f[3] / 2.0).sinh();
        assert!((f[4] - want).abs() < 1e-9, "row {k}: r_hat {} vs {want}", f[4]);
    }
}

#[test]
fn missing_column_is_a_usage_error_naming_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "resp,x\n1.0,0.5\n2.0,0.6\n").unwrap();
    let out = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        "3,0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains('y'), "stderr: {}", stderr_str(&out));
}

#[test]
fn malformed_numbers_are_reported_with_their_location() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "y,x\n1.0,0.5\noops,0.6\n").unwrap();
    let out = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        "3,0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_str(&out);
    assert!(err.contains("oops") && err.contains('2'), "stderr: {err}");
}

#[test]
fn simulate_preset_is_deterministic_and_echoes_its_config() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let out = bsreg(&[
            "simulate",
            "--preset",
            "table3",
            "--reps",
            "3",
            "--seed",
            "7",
            "--out-dir",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
    }
    let j1 = std::fs::read(d1.path().join("sim_report.json")).unwrap();
    let j2 = std::fs::read(d2.path().join("sim_report.json")).unwrap();
    assert_eq!(j1, j2);
    let c1 = std::fs::read_to_string(d1.path().join("sim_report.csv")).unwrap();
    let c2 = std::fs::read_to_string(d2.path().join("sim_report.csv")).unwrap();
    assert_eq!(c1, c2);

    // header comments echo the experiment; body has one row per
    // n x parameter x estimator
    assert!(c1.lines().any(|l| l.starts_with('#') && l.contains("seed: 7")));
    assert!(c1.lines().any(|l| l.starts_with('#') && l.contains("start_rule")));
    let data_rows = c1
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .count();
    assert_eq!(data_rows - 1, 4 * 3 * 2, "csv: {c1}");

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d1.path().join("sim_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["schema"], "bsreg-sim/1");
    assert_eq!(report["config"]["seed"], 7);
    assert_eq!(report["config"]["reps"], 3);
}

#[test]
fn simulate_accepts_a_toml_experiment_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
model = "a + b*x"
params = ["a", "b"]
true_beta = [2.0, -1.0]
true_alpha = 0.5
n_grid = [12]
reps = 60
seed = 5
"#,
    )
    .unwrap();
    let out = bsreg(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("sim_report.json")).unwrap(),
    )
    .unwrap();
    // affine model: every replication converges, and the correction leaves
    // the coefficient estimates untouched
    assert_eq!(report["non_converged"][0][1], 0);
    let cells = report["cells"].as_array().unwrap();
    for param in ["a", "b"] {
        let find = |est: &str| {
            cells
                .iter()
                .find(|c| c["parameter"] == param && c["estimator"] == est)
                .unwrap()["bias"]
                .as_f64()
                .unwrap()
        };
        assert_eq!(find("mle"), find("bce"), "param {param}");
    }
}

#[test]
fn log_response_matches_fitting_pre_logged_data() {
    let model = MeanModel::parse("a + b*x", &["a", "b"], &["x"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let n = 30;
    let mut x = Array2::zeros((n, 1));
    for i in 0..n {
        x[[i, 0]] = 2.0 * rng.random::<f64>();
    }
    let mu = model.eval_mu(&x, &[1.2, 0.7]).unwrap();
    let noise = SinhNormalParams::new(0.5, 0.0, 2.0).unwrap();
    let eps = noise.sample(&mut rng, n);

    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let logged = dir.path().join("logged.csv");
    let mut raw_csv = String::from("t,x\n");
    let mut log_csv = String::from("y,x\n");
    for i in 0..n {
        let ylog = mu[i] + eps[i];
        raw_csv.push_str(&format!("{},{}\n", ylog.exp(), x[[i, 0]]));
        log_csv.push_str(&format!("{},{}\n", ylog, x[[i, 0]]));
    }
    std::fs::write(&raw, raw_csv).unwrap();
    std::fs::write(&logged, log_csv).unwrap();

    let out_a = bsreg(&[
        "fit",
        "--data",
        raw.to_str().unwrap(),
        "--model",
        "a + b*x",
        "--params",
        "a,b",
        "--response",
        "t",
        "--log-response",
    ]);
    let out_b = bsreg(&[
        "fit",
        "--data",
        logged.to_str().unwrap(),
        "--model",
        "a + b*x",
        "--params",
        "a,b",
    ]);
    assert_eq!(out_a.status.code(), Some(0));
    assert_eq!(out_b.status.code(), Some(0));
    let ra: serde_json::Value = serde_json::from_str(&stdout_str(&out_a)).unwrap();
    let rb: serde_json::Value = serde_json::from_str(&stdout_str(&out_b)).unwrap();
    for j in 0..2 {
        let a = ra["mle"]["beta"][j].as_f64().unwrap();
        let b = rb["mle"]["beta"][j].as_f64().unwrap();
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "beta[{j}]: {a} vs {b}");
    }
}

#[test]
fn nonpositive_response_with_log_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("neg.csv");
    std::fs::write(&data, "t,x\n1.0,0.5\n-2.0,0.6\n3.0,0.7\n").unwrap();
    let out = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "a + b*x",
        "--params",
        "a,b",
        "--response",
        "t",
        "--log-response",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    assert_eq!(bsreg(&["--help"]).status.code(), Some(0));
    assert_eq!(bsreg(&["fit", "--help"]).status.code(), Some(0));
    assert_eq!(bsreg(&["--definitely-not-a-flag"]).status.code(), Some(1));
    // --config and --preset are mutually exclusive
    let dir = tempfile::tempdir().unwrap();
    let out = bsreg(&[
        "simulate",
        "--preset",
        "table1",
        "--config",
        "x.toml",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_writes_the_report_to_a_file_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mm.csv");
    let report_path = dir.path().join("report.json");
    write_mm_csv(&data, 30, 105);
    let out = bsreg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "eta*x/(gamma + x)",
        "--params",
        "eta,gamma",
        "--start",
        "3,0.5",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_str(&out).is_empty());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["schema"], "bsreg-fit/1");
}
