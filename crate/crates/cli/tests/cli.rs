use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cardiored"))
}

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "mesh": {"kind": "slab", "extent": [1.0, 1.0, 0.2], "resolution": [4, 4, 1]},
        "solve": {"dt": 0.05, "t_end": 6.0},
        "stimulus": {"sites": [{"center": [0.0, 0.0, 0.1], "radius": 0.3}], "amplitude": 1e5, "duration": 1.0},
        "forward": {"sigma": [3.0, 1.0], "stride": 10},
        "measurement": {"sigma_exact": [3.0, 1.2], "protocol": {"dt_snap": 2.0, "noise_level": 0.0, "seed": 7, "noise": {"kind": "multiplicative"}}},
        "optimizer": {"max_iter": 4},
        "basis": {"n_u": 10, "n_ion": 12, "snapshot_t_end": 3.0},
        "adaptive": {"cycles": 2, "inner_max_iter": 3, "basis": {"n_u": 10, "n_ion": 12}},
        "doe": {"generators": [[3.0, 0.35]], "grid": {"ml": [2.0, 4.0], "mt": [0.3, 1.0], "count": [3, 3]}},
        "out": "out"
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn run(args: &[&str], config: &Path) -> Output {
    let out = bin().args(args).arg("--config").arg(config).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn forward_writes_strided_frames_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert!(run(&["forward"], &cfg).status.success());
    let csv_path = dir.path().join("out/forward/u.csv");
    let first = fs::read(&csv_path).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.starts_with("# cardiored "));
    assert!(text.lines().next().unwrap().contains("config-sha256"));
    // L = 120 steps at stride 10, plus the initial frame
    assert_eq!(data_rows(&text).len(), 13);
    let summary = read_json(&dir.path().join("out/forward/summary.json"));
    assert_eq!(summary["steps"], 120);
    assert_eq!(summary["meta"]["tool"], "cardiored");

    assert!(run(&["forward"], &cfg).status.success());
    assert_eq!(fs::read(&csv_path).unwrap(), first);
}

#[test]
fn rest_state_run_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"stimulus": {"sites": [], "amplitude": 0.0, "duration": 1.0}}));
    assert!(run(&["forward"], &cfg).status.success());
    let rows = data_rows(&fs::read_to_string(dir.path().join("out/forward/u.csv")).unwrap());
    for r in &rows {
        assert!(r[2..].iter().all(|&u| (u + 85.0).abs() < 1e-9), "{r:?}");
    }
}

#[test]
fn measurements_follow_snapshot_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"solve": {"t_end": 30.0}}));
    assert!(run(&["measure"], &cfg).status.success());
    let m = read_json(&dir.path().join("out/measurements.json"));
    assert_eq!(m["set"]["values"].as_array().unwrap().len(), 15);
    assert_eq!(m["sigma_exact"], json!({"ml": 3.0, "mt": 1.2}));
    assert_eq!(m["protocol"]["seed"], 7);
    // 5×5 top-surface grid on a 4×4 slab
    assert_eq!(m["set"]["sites"].as_array().unwrap().len(), 25);
}

#[test]
fn infeasible_truth_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"measurement": {"sigma_exact": [1.0, 2.0]}}));
    let out = run(&["measure"], &cfg);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("admissible"));
}

#[test]
fn reduced_estimate_without_bases_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert!(run(&["measure"], &cfg).status.success());
    let out = run(&["estimate", "--mode", "reduced"], &cfg);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cardiored bases"));
}

#[test]
fn pipeline_bases_then_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert!(run(&["measure"], &cfg).status.success());
    assert!(run(&["bases"], &cfg).status.success());
    let index = read_json(&dir.path().join("out/bases/index.json"));
    let entries = index["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 10);
    for e in entries {
        let file = e["file"].as_str().expect("every sample builds");
        let path = dir.path().join("out/bases").join(file);
        let entry = cardiored_core::archive::load_entry(&path).unwrap();
        assert_eq!(entry.u.rank(), 10);
        let back = cardiored_core::archive::entry_to_bytes(&entry).unwrap();
        assert_eq!(back, fs::read(&path).unwrap());
    }

    assert!(run(&["estimate", "--mode", "full"], &cfg).status.success());
    assert!(run(&["estimate", "--mode", "reduced"], &cfg).status.success());
    let full = read_json(&dir.path().join("out/estimate_full/summary.json"));
    let red = read_json(&dir.path().join("out/estimate_reduced/summary.json"));
    assert!(full["time_percent_of_full"].is_null());
    assert!(red["time_percent_of_full"].as_f64().unwrap() > 0.0);
    assert!(red["forward_solves"].as_u64().unwrap() >= red["backward_solves"].as_u64().unwrap());
    let hist = fs::read_to_string(dir.path().join("out/estimate_reduced/history.csv")).unwrap();
    assert!(hist.lines().nth(1).unwrap().starts_with("iter,sigma_ml"));

    let out_dir = dir.path().join("alt");
    let out = bin()
        .args(["estimate", "--mode", "adaptive", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    // the measurement file lives under the config's out, not the override
    assert!(!out.status.success());
}

#[test]
fn adaptive_library_grows_per_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert!(run(&["measure"], &cfg).status.success());
    assert!(run(&["estimate", "--mode", "adaptive"], &cfg).status.success());
    let s = read_json(&dir.path().join("out/estimate_adaptive/summary.json"));
    let sizes: Vec<u64> = s["library_sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(!sizes.is_empty());
    assert_eq!(sizes, (1..=sizes.len() as u64).collect::<Vec<_>>());
    assert_eq!(s["snapshot_solves"].as_u64().unwrap(), sizes.len() as u64);
}

#[test]
fn doe_map_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert!(run(&["doe"], &cfg).status.success());
    let csv = fs::read_to_string(dir.path().join("out/doe/doe_0.csv")).unwrap();
    let rows: Vec<_> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        let f: Vec<_> = r.split(',').collect();
        let e: f64 = f[2].parse().unwrap();
        let class = if e <= 0.002 {
            "black"
        } else if e <= 0.005 {
            "cyan"
        } else {
            "white"
        };
        assert_eq!(f[3], class);
    }
    let gp = fs::read_to_string(dir.path().join("out/doe/doe_0.gp")).unwrap();
    assert!(gp.contains("doe_0.csv") && gp.contains("set datafile separator ','"));
    let index = read_json(&dir.path().join("out/doe/index.json"));
    assert_eq!(index["band_boundaries"].as_array().unwrap().len(), 4);

    let again = dir.path().join("again");
    let out = bin().args(["doe", "--config"]).arg(&cfg).arg("--out").arg(&again).output().unwrap();
    assert!(out.status.success());
    let a = fs::read_to_string(again.join("doe/doe_0.csv")).unwrap();
    // same map; only the config hash line may differ
    assert_eq!(a.lines().skip(1).collect::<Vec<_>>(), csv.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn full_rank_basis_maps_all_black() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        json!({
            "mesh": {"resolution": [2, 2, 1]},
            "basis": {"n_u": 18, "n_ion": 18, "snapshot_t_end": 6.0}
        }),
    );
    assert!(run(&["doe"], &cfg).status.success());
    let csv = fs::read_to_string(dir.path().join("out/doe/doe_0.csv")).unwrap();
    assert!(csv.lines().filter(|l| !l.starts_with('#')).skip(1).all(|l| l.ends_with(",black")), "{csv}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"solve": {"dt": -1.0}}"#).unwrap();
    let out = run(&["forward"], &path);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dt"));
    let out = bin().args(["forward", "--config", "/nonexistent/c.json"]).output().unwrap();
    assert!(!out.status.success());
}
