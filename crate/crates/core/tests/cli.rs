use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpgame::io::read_density;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fpgame"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

const SCALAR: &str = r#"{
  "system": {"d": 1, "A": [[0.0]],
             "channels": [{"B": [[1.0]], "gains": [[-0.5]]}, {"B": [[1.0]], "gains": [[-0.5]]}]},
  "domain": {"lower": [-1.0], "upper": [1.0], "cells_per_axis": [32]},
  "ulam": {"q": 8, "t_step": 1.0},
  "game": {"candidates": [[[[-0.5]], [[-1.0]]], [[[-0.5]], [[-1.0]]]], "time_grid": [0.5, 1.0]},
  "trace": {"times": [0.0, 1.0, 2.0, 4.0]},
  "perturb": {"sigma": [[1.0]], "epsilon_list": [0.1, 0.0], "h": 0.01, "n_paths": 200, "seed": 3}
}"#;

#[test]
fn stationary_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SCALAR);
    let out = tmp.path().join("out");
    let o = run("stationary", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = std::fs::read_to_string(out.join("stationary.csv")).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 32);
    assert!(text.starts_with("# fpgame "));
    assert!(text.contains("config_sha256="));
    let density = read_density(&out.join("stationary.csv"), None).unwrap();
    assert_eq!(density.len(), 32);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("stationary_report.json")).unwrap())
            .unwrap();
    assert!(report["residual"].as_f64().unwrap() <= 1e-9);
    assert_eq!(report["provenance"]["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn inverted_domain_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &SCALAR.replace(r#""upper": [1.0]"#, r#""upper": [-3.0]"#),
    );
    let o = run("stationary", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("domain.lower"));
}

#[test]
fn unstable_candidates_exit_with_numerical_rejection() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SCALAR
        .replace(r#""A": [[0.0]]"#, r#""A": [[2.0]]"#)
        .replace(
            r#""candidates": [[[[-0.5]], [[-1.0]]], [[[-0.5]], [[-1.0]]]]"#,
            r#""candidates": [[[[-0.5]]], [[[-0.5]]]]"#,
        );
    let cfg = write_config(tmp.path(), &text);
    let o = run("equilibrium", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("every candidate was rejected"));
}

#[test]
fn equilibrium_report_and_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SCALAR);
    let out = tmp.path().join("out");
    let o = run("equilibrium", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("equilibrium.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["choice"], serde_json::json!([0, 0]));
    assert_eq!(report["verification"]["no_deviation"]["passed"], true);
    assert_eq!(report["verification"]["convergence"]["passed"], true);
    let criteria = std::fs::read_to_string(out.join("criteria.csv")).unwrap();
    assert!(criteria.contains("channel,t,criterion"));
    assert_eq!(criteria.lines().count(), 1 + 1 + 2 * 2);
}

#[test]
fn ulam_export_has_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SCALAR);
    let out = tmp.path().join("out");
    assert_eq!(
        run("ulam", &cfg, &out, &["--threads", "2"]).status.code(),
        Some(0)
    );
    let csv = std::fs::read_to_string(out.join("ulam.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap() == "row,col,value");
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("ulam.json")).unwrap()).unwrap();
    assert_eq!(side["leakage"].as_array().unwrap().len(), 32);
    assert_eq!(side["samples_per_row"], 8);
}

#[test]
fn entropy_trace_with_and_without_floor() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SCALAR);
    let plain = tmp.path().join("plain");
    assert_eq!(
        run("entropy-trace", &cfg, &plain, &[]).status.code(),
        Some(0)
    );
    let text = std::fs::read_to_string(plain.join("entropy_trace.csv")).unwrap();
    let first = text.lines().nth(2).unwrap();
    assert!(first.ends_with(",inf"), "{first}");

    let floored = tmp.path().join("floored");
    assert_eq!(
        run("entropy-trace", &cfg, &floored, &["--kl-floor", "1e-9"])
            .status
            .code(),
        Some(0)
    );
    let text = std::fs::read_to_string(floored.join("entropy_trace.csv")).unwrap();
    let values: Vec<f64> = text
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn perturb_and_resilience_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SCALAR);
    let out = tmp.path().join("out");
    assert_eq!(
        run("perturb", &cfg, &out, &["--seed", "5"]).status.code(),
        Some(0)
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("perturb.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);

    let o = run(
        "resilience",
        &cfg,
        &out,
        &["--with-deviations", "--kl-floor"],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(out.join("resilience.csv")).unwrap();
    assert!(csv.contains("epsilon,t,density_id,l1_distance,rel_entropy,support_violation_mass"));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("resilience.json")).unwrap()).unwrap();
    assert_eq!(summary["theta_eps"][1], 0.0);
    assert_eq!(summary["deviations"].as_array().unwrap().len(), 2);
    assert!(out.join("resilience_deviation_ch0_cand1.csv").exists());
}

#[test]
fn missing_block_and_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SCALAR.replace(r#""perturb""#, r#""unused_perturb""#);
    let cfg = write_config(tmp.path(), &text);
    // unknown top-level key
    assert_eq!(
        run("resilience", &cfg, &tmp.path().join("o"), &[])
            .status
            .code(),
        Some(2)
    );
    let cfg = write_config(tmp.path(), SCALAR);
    assert_eq!(
        run(
            "stationary",
            &cfg,
            &tmp.path().join("o"),
            &["--threads", "0"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(bin().arg("bogus").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}
