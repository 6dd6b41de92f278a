use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use auxgmm::config::{table_lineup, RunConfig};
use auxgmm::data::{write_dataset, Case};
use auxgmm::moments::MomentSpec;
use auxgmm::propensity::{ParametricFamily, PropensitySpec};
use auxgmm::sieve::BasisSpec;
use auxgmm::simulate::{generate, DgpSpec};
use serde_json::Value;

fn auxgmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxgmm"))
        .args(args)
        .env("AUXGMM_THREADS", "2")
        .output()
        .unwrap()
}

fn write_data(dir: &Path, spec: &DgpSpec, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("data.csv");
    let ds = generate(spec, n, seed).unwrap();
    write_dataset(&ds, fs::File::create(&path).unwrap()).unwrap();
    path
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn estimate_emits_json_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), &DgpSpec::dgp_a(Case::VerifyOut), 1000, 3);
    let out = auxgmm(&["estimate", "--data", data.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["beta", "se", "vcov", "omega", "jacobian", "diagnostics", "provenance"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["provenance"]["seed"], 3);
    assert_eq!(v["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    let beta = v["beta"][0].as_f64().unwrap();
    assert!((beta - 7.0 / 6.0).abs() < 0.15);
}

#[test]
fn missing_data_file_is_a_data_error() {
    let out = auxgmm(&["estimate", "--data", "/nonexistent/never.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["class"], "data");
    assert!(err["path"].as_str().unwrap().contains("never.csv"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(auxgmm(&["estimate", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        auxgmm(&["simulate", "--preset", "no-such-process"]).status.code(),
        Some(1)
    );
    assert_eq!(auxgmm(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"case": "verify-out", "unknown_key": 1}"#).unwrap();
    let out = auxgmm(&["estimate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_reproducible_and_writes_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("mc.json");
    let args = [
        "simulate", "--preset", "dgp-a", "--n", "400", "--reps", "40", "--seed", "11",
    ];
    let a = auxgmm(&args);
    let b = auxgmm(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let mut with_out = args.to_vec();
    with_out.extend(["--out", target.to_str().unwrap()]);
    assert!(auxgmm(&with_out).status.success());
    assert_eq!(fs::read(&target).unwrap(), a.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["reps"], 40);
}

#[test]
fn bounds_for_a_preset_are_exact() {
    let out = auxgmm(&["bounds", "--preset", "dgp-a", "--case", "verify-out"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("1.111111111111"), "{text}");
}

#[test]
fn config_round_trip_is_a_fixed_point() {
    let mut cfg = RunConfig::default();
    cfg.moment = MomentSpec::Cdf {
        thresholds: vec![-0.5, 0.0, 0.5],
    };
    cfg.basis = Some(BasisSpec::spline(3, 4));
    cfg.estimators = table_lineup();
    cfg.seed = Some(9);
    let text = cfg.to_json();
    let back = RunConfig::from_json(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_json(), text);
    assert_eq!(back.hash(), cfg.hash());
}

/// Five estimators at seven thresholds on simulated data, compared with a
/// stored table. Set `AUXGMM_BLESS=1` to rewrite the stored copy.
#[test]
fn cdf_table_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), &DgpSpec::dgp_b(Case::VerifyOut), 4000, 2024);
    let mut cfg = RunConfig::default();
    cfg.data = Some(data);
    cfg.moment = MomentSpec::Cdf {
        thresholds: vec![-1.0, -0.6, -0.3, 0.0, 0.3, 0.6, 1.0],
    };
    cfg.basis = Some(BasisSpec::spline(3, 6));
    cfg.propensity = Some(PropensitySpec::parametric(ParametricFamily::linear_logit(1)));
    cfg.estimators = table_lineup();
    let config = write_config(dir.path(), &cfg);
    let out = auxgmm(&["estimate", "--config", config.to_str().unwrap(), "--format", "table"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();

    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 8);
    for label in ["Unadjusted", "CEP-NP", "IPW-NP", "IPW-Par", "CEP-Eff-Par"] {
        assert!(lines[0].contains(label));
    }
    assert!(lines[1].starts_with("y=-1"));

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/cdf_table.txt");
    if std::env::var_os("AUXGMM_BLESS").is_some() {
        fs::write(&golden, &table).unwrap();
    }
    assert_eq!(table, fs::read_to_string(&golden).unwrap());
}
