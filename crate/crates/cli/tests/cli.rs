use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn gensens(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gensens"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(fixtures())
        .output()
        .unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const DATA: [&str; 4] = ["--data", "two_study.csv", "--schema", "two_study.schema.json"];

fn with_data(extra: &[&'static str]) -> Vec<&'static str> {
    DATA.iter().chain(extra).copied().collect()
}

#[test]
fn estimate_report_is_populated() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["estimate"][..], &with_data(&["--seed", "11", "--boot", "100"])].concat();
    let out = gensens(&args, dir.path());
    assert!(matches!(out.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(dir.path().join("estimate.json"));
    assert_eq!(v["command"], "estimate");
    assert_eq!(v["config"]["seed"], 11);
    let r = &v["result"];
    assert!(r["tau_hat"].as_f64().unwrap().is_finite());
    assert_eq!(r["arm_counts"]["n_treated"], 28);
    assert_eq!(r["arm_counts"]["n_control"], 32);
    assert_eq!(r["arm_counts"]["per_study"]["2"], serde_json::json!([8, 22]));
    assert!(r["var_w"].as_f64().unwrap() > 0.0);
    let ci = &r["bootstrap"]["ci"];
    assert!(ci["lower"].as_f64().unwrap() < ci["upper"].as_f64().unwrap());
    assert_eq!(r["weights"]["fits"].as_array().unwrap().len(), 3);
}

#[test]
fn estimate_matches_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["estimate"][..], &with_data(&["--seed", "7", "--boot", "200"])].concat();
    let out = gensens(&args, dir.path());
    assert_eq!(out.status.code(), Some(2), "one bootstrap replicate is expected to drop");
    let got = std::fs::read_to_string(dir.path().join("estimate.json")).unwrap();
    let want = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/estimate.json")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn single_study_routes_to_that_study() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["estimate"][..], &with_data(&["--seed", "3", "--boot", "0", "--single-study", "2"])].concat();
    gensens(&args, dir.path());
    let v = read_json(dir.path().join("estimate.json"));
    assert_eq!(v["result"]["study"], 2);
    assert_eq!(v["result"]["estimate"]["n1"], 8);
    assert_eq!(v["result"]["estimate"]["n0"], 22);
}

#[test]
fn sensitivity_outputs_are_coherent() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["sensitivity"][..], &with_data(&["--seed", "3", "--boot", "200"])].concat();
    let out = gensens(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(dir.path().join("sensitivity.json"))["result"].clone();
    let s = &r["summary"];
    let (lo, hi) = (s["rho_bounds"][0].as_f64().unwrap(), s["rho_bounds"][1].as_f64().unwrap());
    assert!(-1.0 <= lo && lo < 0.0 && hi == -lo);
    let cov = r["estimate"]["cov_w_tau"].as_f64().unwrap();
    let (s2, vw) = (s["sigma2_tau_max"].as_f64().unwrap(), s["var_w"].as_f64().unwrap());
    assert!((hi - (1.0 - cov * cov / (s2 * vw)).sqrt()).abs() < 1e-12);
    let rv = s["rv"][0][1].as_f64().unwrap();
    assert!((0.0..1.0).contains(&rv));
    assert!(!r["contour"]["kill_curve"].as_array().unwrap().is_empty());
    assert_eq!(r["minimal_bias_threshold"]["status"], "found");

    let csv = std::fs::read_to_string(dir.path().join("contour.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19_901);
    assert!(std::fs::read_to_string(dir.path().join("contour.svg")).unwrap().starts_with("<svg"));
    assert!(std::fs::read_to_string(dir.path().join("benchmark.csv")).unwrap().lines().nth(1).unwrap().starts_with("x,"));
}

#[test]
fn wald_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = gensens(
        &["wald", "--estimates", "-121.76,57.31,-1218.72", "--sds", "368.50,309.83,528.77"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let r = &read_json(dir.path().join("wald.json"))["result"];
    assert_eq!(r["df"], 2);
    assert!((r["p_value"].as_f64().unwrap() - 0.109).abs() < 0.002);
}

#[test]
fn small_power_run() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["power", "--n", "500", "--k", "1", "--alpha", "0.05", "--reps", "6", "--boot", "100", "--seed", "5"];
    gensens(&args, dir.path());
    let csv = std::fs::read_to_string(dir.path().join("power.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let rate: f64 = row[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn oracle_suite_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = gensens(&["oracle"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(dir.path().join("oracle.json").exists());
}

#[test]
fn reliability_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["estimate"][..], &with_data(&["--seed", "1", "--boot", "0", "--propensity-epsilon", "0.45"])].concat();
    let out = gensens(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fitted propensities outside"));
    let v = read_json(dir.path().join("estimate.json"));
    assert!(!v["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = gensens(&["estimate", "--data", "missing.csv", "--modifiers", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    let out = gensens(&["estimate", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn drawn_seed_is_printed_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["estimate"][..], &with_data(&["--boot", "20"])].concat();
    let out = gensens(&args, dir.path());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with("seed: ")).expect("seed not printed");
    let seed: u64 = line["seed: ".len()..].trim().parse().unwrap();
    let v = read_json(dir.path().join("estimate.json"));
    assert_eq!(v["config"]["seed"].as_u64(), Some(seed));
}
