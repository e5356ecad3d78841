use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clusterbal"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Clusters of four units, treatment alternating with cluster and unit index.
fn write_data(dir: &Path, clusters: usize) -> String {
    let mut text = String::from("cluster_id,unit_id,treatment,outcome,x1\n");
    for c in 0..clusters {
        for u in 0..4 {
            let a = (c + u + c / 2) % 2;
            let x = (c * 7 + u * 3) % 5;
            let y = 1.0 + 0.5 * a as f64 + 0.1 * x as f64 + 0.01 * (c * u) as f64;
            text.push_str(&format!("c{c},{u},{a},{y},{x}\n"));
        }
    }
    let path = dir.join("data.csv");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn estimate_writes_intervals_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 12);
    let out = dir.path().join("out");
    let o = run(&[
        "estimate",
        "--dataset",
        &data,
        "--policy",
        r#"{"kind":"gate"}"#,
        "--structure",
        r#"{"kind":"no_interference"}"#,
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = read_json(&out.join("estimate.json"));
    let r = &est["results"][0];
    assert_eq!(r["estimator"], "balancing");
    assert!(r["variance"]["std_error"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert!(csv.starts_with("estimator,point,std_error,ci_low,ci_high,level,feasible"));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "estimate");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn infeasible_balancing_exits_two_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 3);
    let structure = r#"{"kind":"tensor_with_covariates","inner":{"kind":"knn_pattern","k":2},"columns":[{"column":"x1"},"intercept"]}"#;
    let out = dir.path().join("out");
    let args = [
        "estimate",
        "--dataset",
        &data,
        "--policy",
        r#"{"kind":"gate"}"#,
        "--structure",
        structure,
        "--out-dir",
        out.to_str().unwrap(),
    ];
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("imbalance.json"));
    assert!(!report["entries"].as_array().unwrap().is_empty());
    assert!(out.join("manifest.json").exists());

    let mut allowed = args.to_vec();
    allowed.push("--allow-infeasible");
    let o = run(&allowed);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = read_json(&out.join("estimate.json"));
    assert!(est["results"][0]["note"].is_string());
}

#[test]
fn select_with_one_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 10);
    let out = dir.path().join("out");
    let o = run(&[
        "select",
        "--dataset",
        &data,
        "--policy",
        r#"{"kind":"gate"}"#,
        "--candidates",
        r#"[{"kind":"no_interference"}]"#,
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("select.json"));
    assert_eq!(report["chosen"], 0);
    assert!(report["tests"].as_array().unwrap().is_empty());
}

#[test]
fn simulate_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = r#"{"n":40,"cluster_sizes":{"6":1.0},"p":2,"rho":0.5,"kappa":0.2,"snr_target":1.0,"sigma2":1.0,"interference":"knn2","seed":3,"gamma":1.0,"truth_clusters":2000}"#;
    let o = run(&[
        "simulate",
        "--config",
        config,
        "--reps",
        "4",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("simulate.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("interference,n,kappa,snr"));
    assert_eq!(csv.lines().count(), 4);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["seed_from_entropy"], false);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["estimate", "--no-such-flag"]).status.code(), Some(64));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "estimate",
        "--dataset",
        dir.path().join("absent.csv").to_str().unwrap(),
        "--policy",
        r#"{"kind":"gate"}"#,
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
