use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const V: &str = r#"{"type":"rkhs","kernel":{"family":"gaussian","lengthscale":0.1},"atoms":[{"center":0.4,"order":0,"weight":0.1},{"center":0.6,"order":0,"weight":-0.1}]}"#;
const W: &str = r#"{"type":"rkhs","kernel":{"family":"gaussian","lengthscale":0.1},"atoms":[{"center":-0.1,"order":0,"weight":-0.05},{"center":0.0,"order":0,"weight":0.1},{"center":0.1,"order":0,"weight":-0.05}]}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wkrr"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate_heat_with_truth(dir: &Path) {
    ok(
        dir,
        &["simulate", "--out", "sim", "--n", "32", "--l", "8", "--horizon", "0.01", "--potential", V, "--interaction", W],
    );
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/diagnostics.json")
}

fn close(a: &Value, b: &Value, path: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12), "{path}: {x} vs {y}");
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}");
            // Round-off sized; checked against an absolute bound instead.
            for (k, v) in x.iter().filter(|(k, _)| *k != "max_abs_derivative") {
                close(v, &y[k], &format!("{path}.{k}"));
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                close(p, q, &format!("{path}[{i}]"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

/// Heat flow with a small potential and interaction, then estimation with the
/// entropy known. Set `WKRR_BLESS=1` to rewrite the golden file.
#[test]
fn end_to_end_matches_golden_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    simulate_heat_with_truth(dir.path());
    ok(
        dir.path(),
        &["estimate", "--out", "est", "--data", "sim/rho.csv", "--u", "entropy", "--terminal", "exclude", "--lambda1",
            "0.05", "--lambda2", "0.05", "--seed", "7"],
    );
    let diagnostics = read_json(dir.path().join("est/diagnostics.json"));
    let golden = golden_path();
    if std::env::var("WKRR_BLESS").is_ok() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, serde_json::to_string_pretty(&diagnostics).unwrap() + "\n").unwrap();
    }
    close(&diagnostics, &read_json(golden), "diagnostics");
    assert!(diagnostics["stationarity"]["max_abs_derivative"].as_f64().unwrap() < 1e-8);

    let functions = fs::read_to_string(dir.path().join("est/functions.csv")).unwrap();
    assert_eq!(functions.lines().next().unwrap(), "x,v_hat,w_hat,w_hat_centered");
    assert_eq!(functions.lines().count(), 202);
    let header = read_json(dir.path().join("est/coefficients.json"));
    let bytes = fs::metadata(dir.path().join("est/coefficients.bin")).unwrap().len();
    assert_eq!(bytes as u64, 8 * header["length"].as_u64().unwrap());
}

#[test]
fn missing_sidecar_exits_with_meta_missing() {
    let dir = tempfile::tempdir().unwrap();
    simulate_heat_with_truth(dir.path());
    fs::remove_file(dir.path().join("sim/rho.meta.json")).unwrap();
    let out = run(dir.path(), &["estimate", "--out", "est", "--data", "sim/rho.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "meta_missing");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"command": "simulate", "n": 16, "l": 3, "horizon": 0.005, "seed": 11, "out": "from_config"}"#,
    )
    .unwrap();
    ok(dir.path(), &["simulate", "--config", "cfg.json", "--l", "4"]);
    let manifest = read_json(dir.path().join("from_config/manifest.json"));
    assert_eq!(manifest["config"]["n"], 16);
    assert_eq!(manifest["config"]["l"], 4);
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["config"].get("out").is_none());
    let rows = fs::read_to_string(dir.path().join("from_config/rho.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.json"), r#"{"horizn": 0.1}"#).unwrap();
    let out = run(dir.path(), &["simulate", "--config", "typo.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "invalid_config");

    fs::write(dir.path().join("other.json"), r#"{"command": "sweep"}"#).unwrap();
    let out = run(dir.path(), &["simulate", "--config", "other.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(dir.path(), &["simulate", "--u", "power:0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "invalid_energy");

    let out = run(dir.path(), &["sweep", "--alpha", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "invalid_plan");
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // Converging velocities collide well before the horizon.
    let out = run(
        dir.path(),
        &["simulate", "--flow", "hamiltonian", "--u", "none", "--n", "16", "--l", "4", "--horizon", "1.0", "--phase",
            r#"{"type":"cosine","amplitude":0.3,"frequency":1.0,"phase":0.0}"#],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "particle_crossing");
}

#[test]
fn lock_file_guards_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("sim")).unwrap();
    fs::write(dir.path().join("sim/.lock"), "").unwrap();
    let out = run(dir.path(), &["simulate", "--out", "sim", "--n", "16", "--l", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "output_locked");

    fs::remove_file(dir.path().join("sim/.lock")).unwrap();
    ok(dir.path(), &["simulate", "--out", "sim", "--n", "16", "--l", "2"]);
    assert!(!dir.path().join("sim/.lock").exists());
}

#[test]
fn inputs_are_not_modified_and_manifest_records_them() {
    let dir = tempfile::tempdir().unwrap();
    simulate_heat_with_truth(dir.path());
    let before = fs::read(dir.path().join("sim/rho.csv")).unwrap();
    ok(dir.path(), &["w2", "--out", "w2", "--rho", "sim/rho.csv", "--sigma", "sim/rho.csv"]);
    assert_eq!(before, fs::read(dir.path().join("sim/rho.csv")).unwrap());
    let manifest = read_json(dir.path().join("w2/manifest.json"));
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 4);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    let w2 = read_json(dir.path().join("w2/w2.json"));
    assert!(w2["w2"].as_array().unwrap().iter().all(|v| v.as_f64().unwrap() < 1e-12));
}
