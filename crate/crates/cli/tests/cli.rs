use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn data(name: &str) -> String {
    manifest_dir().join("tests/data").join(name).display().to_string()
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(manifest_dir().join("tests/golden").join(name)).unwrap()
}

fn audit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audit")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn illustrative_args() -> Vec<String> {
    ["--family", "ols_ate", "--input", &data("illustrative_propensity.csv"), "--tau", &data("illustrative_tau.csv")]
        .map(String::from)
        .to_vec()
}

#[test]
fn illustrative_audit_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let mut args = vec!["audit".to_string(), "--support=0,5".into(), "--json".into(), json.display().to_string()];
    args.extend(illustrative_args());
    let out = audit(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(stdout(&out), golden("illustrative_audit.txt"));

    let report = read_json(&json);
    let expected: Value = serde_json::from_str(&golden("illustrative_audit.json")).unwrap();
    assert_eq!(report, expected);
    let p = report["uniform"]["p_internal"].as_f64().unwrap();
    assert!((p - 0.5).abs() < 1e-12);
    let inclusion = report["uniform"]["inclusion"]["inclusion"][1].as_f64().unwrap();
    assert!((inclusion - 0.375).abs() < 1e-12);
    assert!((report["moments"]["mu"].as_f64().unwrap() - 2.2).abs() < 1e-12);
}

#[test]
fn staggered_panel_both_representations() {
    let panel = data("staggered_panel.csv");
    let cdh = audit(&["audit", "--family", "twfe_cdh", "--panel", &panel]);
    assert_eq!(stdout(&cdh), golden("staggered_twfe_cdh.txt"));
    let h = audit(&["audit", "--family", "twfe_h", "--panel", &panel]);
    assert_eq!(stdout(&h), golden("staggered_twfe_h.txt"));

    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("h.json");
    audit(&["audit", "--family", "twfe_h", "--panel", &panel, "--json", json.to_str().unwrap(), "--quiet"]);
    let report = read_json(&json);
    // shares 0.3 / 0.4 / 0.3 over g = 2, 3, never
    let (p2, p3): (f64, f64) = (0.3, 0.4);
    let omega = (4.0 - 2.0 * p2 - 4.0 * p3) / (2.0 - 2.0 * p2 - p3);
    let closed = ((2.0 * p2 + omega * p3) / (2.0 * p2 + p3)).min((2.0 * p2 / omega + p3) / (2.0 * p2 + p3));
    assert!((report["uniform"]["p_internal"].as_f64().unwrap() - closed).abs() < 1e-12);
    assert_eq!(report["existence"]["uniform"], Value::Bool(true));
}

#[test]
fn simulate_is_deterministic() {
    let spec = data("illustrative_spec.json");
    let first = stdout(&audit(&["simulate", "--spec", &spec, "--n", "500"]));
    let second = stdout(&audit(&["simulate", "--spec", &spec, "--n", "500"]));
    assert_eq!(first, second);
    assert_eq!(first.lines().count(), 501);
    let reseeded = stdout(&audit(&["--seed", "8", "simulate", "--spec", &spec, "--n", "500"]));
    assert_ne!(first, reseeded);
}

#[test]
fn bootstrap_reports_every_draw() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample.csv");
    let json = dir.path().join("boot.json");
    let spec = data("illustrative_spec.json");
    stdout(&audit(&["simulate", "--spec", &spec, "--n", "3000", "--out", sample.to_str().unwrap()]));
    let run = |seed: &str| {
        let out = audit(&[
            "bootstrap",
            "--family",
            "ols_ate",
            "--data",
            sample.to_str().unwrap(),
            "--B",
            "400",
            "--seed",
            seed,
            "--json",
            json.to_str().unwrap(),
        ]);
        stdout(&out);
        read_json(&json)
    };
    let res = run("11");
    assert_eq!(res["draws"].as_array().unwrap().len(), 400);
    let ci = res["ci"].as_array().unwrap();
    let p_hat = res["p_hat"].as_f64().unwrap();
    assert_eq!(ci[0].as_f64().unwrap(), 0.0);
    assert!(ci[1].as_f64().unwrap() >= p_hat - 1e-12);
    assert_eq!(run("11"), res);
}

#[test]
fn estimate_without_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample.csv");
    let json = dir.path().join("est.json");
    let spec = data("illustrative_spec.json");
    stdout(&audit(&["simulate", "--spec", &spec, "--n", "20000", "--out", sample.to_str().unwrap()]));
    stdout(&audit(&["estimate", "--quiet", "--family", "ols_ate", "--data", sample.to_str().unwrap(), "--json", json.to_str().unwrap()]));
    let est = read_json(&json);
    assert_eq!(est["n"], 20000);
    assert!(est["bootstrap"].is_null());
    assert!((est["p_hat"].as_f64().unwrap() - 0.5).abs() < 0.05);
}

#[test]
fn bounds_and_figure_data() {
    let mut args = vec!["bounds".to_string(), "--support=0,5".into()];
    args.extend(illustrative_args());
    let text = stdout(&audit(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert!(text.contains("[1.100000, 3.600000]"), "{text}");

    let mut args = vec!["figure-data".to_string(), "--figure".into(), "2".into()];
    args.extend(illustrative_args());
    let csv = stdout(&audit(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tau,mass,kept,alpha"));
    let kept: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(kept.len(), 2);
    assert!((kept[0] - 1.0).abs() < 1e-12 && (kept[1] - 0.375).abs() < 1e-12);
}

#[test]
fn usage_and_domain_errors() {
    let missing_family = audit(&["audit", "--input", &data("illustrative_propensity.csv")]);
    assert_eq!(missing_family.status.code(), Some(2));
    let bad_figure = audit(&["figure-data", "--figure", "3", "--family", "cells", "--input", "x.csv"]);
    assert_eq!(bad_figure.status.code(), Some(2));

    let missing_file = audit(&["audit", "--family", "cells", "--input", "/nonexistent/cells.csv"]);
    assert_eq!(missing_file.status.code(), Some(1));
    let no_tau = audit(&["figure-data", "--figure", "2", "--family", "ols_ate", "--input", &data("illustrative_propensity.csv")]);
    assert_eq!(no_tau.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_tau.stderr).starts_with("error:"));
}
