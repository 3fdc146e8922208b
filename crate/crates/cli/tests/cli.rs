//! Black-box tests of the `balmatch` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_balmatch")).args(args).current_dir(dir).output().unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const IDENTICAL: &str = "id,z,y,x\na,1,1,1\nb,1,3,3\nc,0,0,3\nd,0,0,1\n";
const DISJOINT: &str = "id,z,y,x\na,1,1,0\nb,1,3,0.1\nc,0,0,10\nd,0,0,11\n";
const TWINS: &str = "id,z,y,x1,x2\na,1,1.5,0.1,0.4\nb,1,-2,0.7,0.2\nc,0,-2,0.7,0.2\nd,0,1.5,0.1,0.4\n";

#[test]
fn match_identical_arms_succeeds_with_m_two() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", IDENTICAL);
    let out = run(&["match", "--input", "d.csv", "--delta", "0.01", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = json(tmp.path().join("o/report.json"));
    for d in rep["directions"].as_array().unwrap() {
        assert_eq!(d["chosen_m"], 2);
    }
    assert_eq!(rep["version"], balmatch::VERSION);
    assert_eq!(rep["config"]["delta"], "0.01");
    assert_eq!(rep["seed"], 0);
    let matches = std::fs::read_to_string(tmp.path().join("o/matches.csv")).unwrap();
    assert!(matches.starts_with("direction,source_id,target_id\n"));
    assert_eq!(matches.lines().count(), 9);
    let weights = std::fs::read_to_string(tmp.path().join("o/weights.csv")).unwrap();
    assert!(weights.starts_with("id,z,weight_raw,weight_estimator_form\n"));
}

#[test]
fn disjoint_support_exits_two_and_names_both_directions() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", DISJOINT);
    let out = run(&["match", "--input", "d.csv", "--delta", "0.5", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let rep = json(tmp.path().join("o/report.json"));
    assert_eq!(rep["feasible"], false);
    let dirs = rep["directions"].as_array().unwrap();
    assert_eq!(dirs.len(), 2);
    for d in dirs {
        assert!(d["chosen_m"].is_null());
        assert!(d["worst_violation"].as_f64().unwrap() > 1.0);
        assert_eq!(d["worst_column"], "x");
    }
}

#[test]
fn malformed_input_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "bad.csv", "id,z,y,x\na,1,1,oops\n");
    assert_eq!(run(&["match", "--input", "bad.csv"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["match", "--input", "missing.csv"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["match", "--bogus-flag"], tmp.path()).status.code(), Some(1));
}

#[test]
fn null_effect_twins_estimate_zero() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", TWINS);
    let out = run(&["estimate", "--input", "d.csv", "--delta", "0.001", "--m-policy", "fixed:1", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let est = json(tmp.path().join("o/estimate.json"));
    assert!(est["estimate"]["point"].as_f64().unwrap().abs() < 1e-10);
    assert!(est["estimate"]["ci"].is_array());
}

#[test]
fn att_mode_has_no_variance_and_a_caveat() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", IDENTICAL);
    let out = run(&["estimate", "--input", "d.csv", "--delta", "0.01", "--estimand", "att", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let est = &json(tmp.path().join("o/estimate.json"))["estimate"];
    assert_eq!(est["point"], 2.0);
    let obj = est.as_object().unwrap();
    assert!(!obj.contains_key("variance"));
    assert!(!obj.contains_key("ci"));
    assert!(est["caveat"].as_str().unwrap().contains("point estimate"));
}

#[test]
fn estimate_from_existing_matches() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", IDENTICAL);
    assert_eq!(run(&["match", "--input", "d.csv", "--delta", "0.01", "--out", "m"], tmp.path()).status.code(), Some(0));
    let out = run(&["estimate", "--input", "d.csv", "--delta", "0.01", "--matches", "m/matches.csv", "--out", "e"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(tmp.path().join("e/estimate.json"))["estimate"]["point"], 2.0);
}

#[test]
fn config_file_is_merged_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", IDENTICAL);
    write(tmp.path(), "cfg.json", r#"{"input": "d.csv", "delta": "0.01", "seed": 3, "m_policy": "fixed:1"}"#);
    let out = run(&["match", "--config", "cfg.json", "--seed", "9", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let rep = json(tmp.path().join("o/report.json"));
    assert_eq!(rep["config"]["seed"], 9);
    assert_eq!(rep["config"]["m_policy"], "fixed:1");
    assert_eq!(rep["directions"][0]["chosen_m"], 1);
    write(tmp.path(), "bad.json", r#"{"nonsense": 1}"#);
    assert_eq!(run(&["match", "--config", "bad.json"], tmp.path()).status.code(), Some(1));
}

#[test]
fn diagnose_formula_and_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["diagnose", "--rho", "0.5", "--delta0", "0.05", "--k", "2", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let rep = json(tmp.path().join("o/feasibility.json"));
    assert_eq!(rep["feasibility"]["n_min"], 7);
    let out = run(&["diagnose"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn diagnose_flags_vacuous_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", DISJOINT);
    let out = run(&["diagnose", "--input", "d.csv", "--delta", "0.1", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let f = &json(tmp.path().join("o/feasibility.json"))["feasibility"];
    assert_eq!(f["vacuous"], true);
    assert_eq!(f["rho"]["vacuous"], true);
    assert!(f["n_min"].is_null());
    assert!(f["overlap"]["note"].as_str().unwrap().contains("heuristic"));
}

#[test]
fn simulate_empty_estimator_list_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--estimators", "", "--out", "e"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("e/mc_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);

    let args = |o: &'static str| ["simulate", "--dgp", "dgp_a", "--n", "60,90", "--reps", "4", "--seed", "5", "--out", o];
    assert_eq!(run(&args("a"), tmp.path()).status.code(), Some(0));
    assert_eq!(run(&args("b"), tmp.path()).status.code(), Some(0));
    let a = std::fs::read(tmp.path().join("a/mc_report.csv")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("b/mc_report.csv")).unwrap());
    let rep = json(tmp.path().join("a/mc_report.json"));
    assert_eq!(rep["report"]["base_seed"], 5);
    assert_eq!(rep["version"], balmatch::VERSION);
}

#[test]
fn oracle_reports_largest_multiplicity() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", IDENTICAL);
    let out = run(&["oracle", "--input", "d.csv", "--delta", "0.01", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(tmp.path().join("o/oracle.json"))["m"], 2);
    write(tmp.path(), "x.csv", DISJOINT);
    let out = run(&["oracle", "--input", "x.csv", "--delta", "0.5", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn without_replacement_matches_one_direction() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", "id,z,y,x\na,1,1,1\nb,1,3,3\nc,0,0,3\nd,0,0,1\ne,0,0,2\n");
    let out = run(&["match", "--input", "d.csv", "--delta", "0.01", "--replacement", "without", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = json(tmp.path().join("o/report.json"));
    assert_eq!(rep["directions"].as_array().unwrap().len(), 1);
    assert_eq!(rep["directions"][0]["chosen_m"], 1);
}
