use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const MODE1: &str = r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6}}"#;

fn cct(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cct"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, config).unwrap();
    let out = dir.path().join("out");
    (dir, path, out)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: PathBuf) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let hash = lines.next().unwrap().to_string();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rest: String = lines.map(|l| format!("{l}\n")).collect();
    let rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(rest.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (hash, header, rows)
}

#[test]
fn cct_mode_one_document() {
    let (_d, config, out) = setup(MODE1);
    let o = cct(&["cct", "--verify"], &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(out.join("cct.json"));
    assert_eq!(doc["mode"], 1);
    let t = doc["t_cr"].as_f64().unwrap();
    let expected = -(0.1 / 0.5) * (1.0f64 - 0.5 * 0.6 / 0.5).ln();
    assert!((t - expected).abs() < 1e-6, "{t} vs {expected}");
    assert_eq!(doc["verify"]["report"]["pass"], true);
    assert_eq!(doc["config_sha256"].as_str().unwrap().len(), 64);

    let (hash, header, rows) = csv_rows(out.join("fault_trajectory.csv"));
    assert!(hash.starts_with("# config_sha256="));
    assert_eq!(header, ["t", "x1", "x2", "H"]);
    assert!(rows.len() > 2);
    assert!(out.join("post_trajectory.csv").exists());
}

#[test]
fn infeasible_operating_point_writes_error_document() {
    let (_d, config, out) =
        setup(r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.4, "omega_max": 0.6}}"#);
    let o = cct(&["cct"], &config, &out);
    assert_eq!(o.status.code(), Some(1));
    let doc = json(out.join("cct.json"));
    assert_eq!(doc["error"], "InfeasibleOperatingPoint");
}

#[test]
fn config_errors_exit_two() {
    let cases = [
        "not json",
        r#"{"system": {"kind": "smib", "Pm": 0.5}}"#,
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6}, "params": ["X"]}"#,
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": -1.0, "delta_max": 0.8, "omega_max": 0.6}}"#,
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6}, "extra": 1}"#,
    ];
    for c in cases {
        let (_d, config, out) = setup(c);
        assert_eq!(cct(&["cct"], &config, &out).status.code(), Some(2), "{c}");
    }
    let (_d, config, out) = setup(MODE1);
    assert_eq!(cct(&["cct", "--tol", "bogus=1"], &config, &out).status.code(), Some(2));
    assert_eq!(cct(&["cct", "--tol", "bisection_tol=-1"], &config, &out).status.code(), Some(2));
    // no sweep section
    assert_eq!(cct(&["sweep"], &config, &out).status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_cct")).arg("cct").output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn tolerance_override_changes_bracket() {
    let (_d, config, out) = setup(r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.3, "delta_max": 0.8, "omega_max": 0.6}}"#);
    assert!(cct(&["cct", "--tol", "bisection_tol=1e-6"], &config, &out).status.success());
    let doc = json(out.join("cct.json"));
    assert_eq!(doc["mode"], 2);
    assert!(doc["bracket_width"].as_f64().unwrap() < 1e-6);
}

#[test]
fn sens_mode_two_with_verification() {
    let (_d, config, out) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.3, "delta_max": 0.8, "omega_max": 0.6},
            "params": ["M", "Pm"]}"#,
    );
    let o = cct(&["sens", "--verify"], &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(out.join("sens.json"));
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows[0]["param"], "M");
    assert!(rows[0]["dtcl_dp"].as_f64().unwrap() > 0.0);
    assert!(rows.iter().all(|r| r["verify"]["pass"] == true));
}

#[test]
fn sens_mode_three_is_unsupported() {
    let (_d, config, out) =
        setup(r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 100.0, "omega_max": 100.0}}"#);
    let o = cct(&["sens"], &config, &out);
    assert_eq!(o.status.code(), Some(1));
    let doc = json(out.join("sens.json"));
    assert_eq!(doc["mode"], 3);
    assert!(doc["rows"].as_array().unwrap().iter().all(|r| r["error"] == "UnsupportedMode"));
}

#[test]
fn sweep_over_inertia_switches_mode() {
    let (_d, config, out) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6},
            "sweep": {"param": "M", "from": 0.12, "to": 0.3, "count": 4}}"#,
    );
    assert!(cct(&["sweep"], &config, &out).status.success());
    let (_, header, rows) = csv_rows(out.join("sweep.csv"));
    assert_eq!(header[0], "value");
    let modes: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(modes, ["1", "1", "1", "2"]);
    assert!(rows.iter().all(|r| r[5].is_empty()));
}

#[test]
fn pm_sweep_is_decreasing_with_tangents() {
    let (_d, config, out) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6},
            "sweep": {"param": "Pm", "from": 0.4, "to": 0.58, "count": 4, "tangents": true}}"#,
    );
    assert!(cct(&["sweep"], &config, &out).status.success());
    let (_, _, rows) = csv_rows(out.join("sweep.csv"));
    let t: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(t.windows(2).all(|w| w[1] < w[0]), "{t:?}");
    for r in &rows {
        let (v, tc, s, b): (f64, f64, f64, f64) =
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[5].parse().unwrap(), r[6].parse().unwrap());
        assert!(s < 0.0);
        assert!((b + s * v - tc).abs() < 1e-12);
    }
}

#[test]
fn empty_sweep_is_header_only() {
    let (_d, config, out) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6},
            "sweep": {"param": "Pm", "from": 0.4, "to": 0.5, "count": 0}}"#,
    );
    assert!(cct(&["sweep"], &config, &out).status.success());
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn sweep_is_byte_identical_across_job_counts() {
    let (d, config, _) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6},
            "sweep": {"param": "Pm", "from": 0.4, "to": 0.58, "count": 6, "tangents": true}}"#,
    );
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert!(cct(&["sweep", "--jobs", "1"], &config, &a).status.success());
    assert!(cct(&["sweep", "--jobs", "3"], &config, &b).status.success());
    assert_eq!(fs::read(a.join("sweep.csv")).unwrap(), fs::read(b.join("sweep.csv")).unwrap());
}

#[test]
fn sr_grid_writes_cells_and_annotations() {
    let (_d, config, out) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.2, "delta_max": 0.8, "omega_max": 0.6},
            "grid": {"x1_range": [-3.0, 1.0], "x2_range": [-1.5, 1.0], "nx": 20, "ny": 20}}"#,
    );
    assert!(cct(&["sr-grid"], &config, &out).status.success());
    let (_, header, cells) = csv_rows(out.join("sr_cells.csv"));
    assert_eq!(header, ["x1", "x2", "class", "t_event"]);
    assert_eq!(cells.len(), 400);
    assert!(cells.iter().any(|r| r[2] == "Stable"));
    let (_, header, ann) = csv_rows(out.join("sr_annotations.csv"));
    assert_eq!(header[2], "kind");
    assert!(!ann.is_empty());
}

#[test]
fn validate_passes_on_defaults_and_fails_with_impossible_tolerance() {
    let (_d, config, out) = setup(MODE1);
    let o = cct(&["validate"], &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, header, rows) = csv_rows(out.join("validate.csv"));
    assert_eq!(header.last().unwrap(), "pass");
    assert!(rows.iter().all(|r| r[7] == "true"));

    let (_d, config, out) = setup(
        r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6},
            "params": ["Pm"],
            "validate": {"quantities": ["cct_slope"], "slope_tol": 1e-15, "slope_abs_tol": 0.0}}"#,
    );
    assert_eq!(cct(&["validate"], &config, &out).status.code(), Some(3));
    let (_, _, rows) = csv_rows(out.join("validate.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "dtcl/dPm");
}

#[test]
fn expression_system_matches_smib() {
    let (_d, config, out) = setup(
        r#"{"system": {
              "kind": "expr",
              "states": ["delta", "omega"],
              "params": [{"name": "Pm", "value": 0.5}, {"name": "M", "value": 0.1}, {"name": "wmax", "value": 0.6}],
              "constants": {"D": 0.5},
              "pre": {"field": ["omega", "(Pm - sin(delta) - D*omega)/M"]},
              "fault": {"field": ["omega", "(Pm - D*omega)/M"],
                        "constraints": [{"name": "speed", "expr": "wmax - omega"}]},
              "post": {"field": ["omega", "(Pm - sin(delta) - D*omega)/M"],
                       "constraints": [{"name": "speed", "expr": "wmax - omega"}]}},
            "params": ["wmax"]}"#,
    );
    assert!(cct(&["sens"], &config, &out).status.success());
    let doc = json(out.join("sens.json"));
    assert_eq!(doc["mode"], 1);
    let u: f64 = 0.5 * 0.6 / 0.5;
    let expected = 0.1 / (0.5 * (1.0 - u));
    let got = doc["rows"][0]["dtcl_dp"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-5 * expected, "{got} vs {expected}");
}
