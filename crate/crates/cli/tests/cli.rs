use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fpi_core::io::{read_manifest, verify_manifest};

fn fpi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpi"))
        .args(args)
        .current_dir(dir)
        .env("FPI_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

const SMALL: &str = r#"{"grid": {"dimensions": 2, "cells_per_axis": [6, 6]}, "horizon": 0.2}"#;

#[test]
fn certify_default_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"grid": {"dimensions": 2, "cells_per_axis": [16, 16]}}"#);
    let out = fpi(&["certify", "--config", &cfg, "--out", "cert"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    for id in [1, 2, 3, 4, 5, 6, 9] {
        assert!(stdout.contains(&format!("criterion {id} ")), "{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
    let manifest = read_manifest(&dir.path().join("cert")).unwrap();
    assert_eq!(manifest.exit_code, 0);
    assert!(manifest.outputs.iter().any(|e| e.path == "certify.json"));
}

#[test]
fn zero_time_step_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"grid": {"dimensions": 2, "cells_per_axis": [6, 6]}, "dt": 0.0}"#);
    let out = fpi(&["simulate", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`dt`"), "{err}");
}

#[test]
fn oversized_spectrum_hits_the_dimension_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"grid": {"dimensions": 2, "cells_per_axis": [96, 96]}}"#);
    let out = fpi(&["spectrum", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dense-analysis cap"));
    let manifest = read_manifest(&dir.path().join("o")).unwrap();
    assert!(manifest.outputs.iter().any(|e| e.path == "failure.json"));
}

#[test]
fn unknown_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        "{\n  \"grid\": {\"dimensions\": 2, \"cells_per_axis\": [6, 6]},\n  \"horizont\": 1.0\n}\n",
    );
    let out = fpi(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("horizont"), "{err}");
}

#[test]
fn missing_config_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fpi(&["simulate", "--config", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_fpi"))
        .args(["simulate", "--config", &cfg])
        .current_dir(dir.path())
        .env("FPI_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_csv_and_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"grid": {"dimensions": 2, "cells_per_axis": [6, 6]}, "horizon": 0.5,
            "initial": {"kind": "random", "norm": 1.0}, "potential": {"kind": "zero"}}"#,
    );
    for out in ["a", "b"] {
        let o = fpi(&["simulate", "--config", &cfg, "--out", out, "--seed", "11"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["energy.csv", "log_norm.csv", "snapshot_00001.bin"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    let a = dir.path().join("a");
    let manifest = read_manifest(&a).unwrap();
    assert_eq!(manifest.seed, 11);
    assert!(verify_manifest(&a, &manifest).unwrap().is_empty());
    let mut listed: Vec<String> = manifest.outputs.iter().map(|e| e.path.clone()).collect();
    let mut present: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    listed.sort();
    present.sort();
    assert_eq!(listed, present);
}

#[test]
fn different_seed_changes_random_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"grid": {"dimensions": 2, "cells_per_axis": [6, 6]}, "horizon": 0.1, "initial": {"kind": "random", "norm": 1.0}}"#,
    );
    fpi(&["simulate", "--config", &cfg, "--out", "a", "--seed", "1"], dir.path());
    fpi(&["simulate", "--config", &cfg, "--out", "b", "--seed", "2"], dir.path());
    let a = fs::read(dir.path().join("a/energy.csv")).unwrap();
    let b = fs::read(dir.path().join("b/energy.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn spectrum_csv_is_sorted_by_real_part() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out = fpi(&["spectrum", "--config", &cfg, "--out", "s"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("s/spectrum.csv")).unwrap();
    let re: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(!re.is_empty());
    assert!(re.windows(2).all(|w| w[0] >= w[1]));
    assert!(re[0] < 0.0);
}

#[test]
fn probes_run_on_a_small_forced_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"grid": {"dimensions": 2, "cells_per_axis": [6, 6]}, "dt": 0.02, "horizon": 4.0,
            "forcing": {"kind": "shear", "amplitude": 3.0},
            "probes": {"ensemble_size": 4, "pairs": 4, "restart_horizon": 2.0, "dimension_samples": 100}}"#,
    );
    for (sub, file) in [("absorb", "absorbing.json"), ("stabilize", "stabilizability.json"), ("dimension", "dimension.json")] {
        let out = fpi(&[sub, "--config", &cfg, "--out", sub], dir.path());
        assert_eq!(
            out.status.code(),
            Some(0),
            "{sub}: {}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(dir.path().join(sub).join(file).exists());
    }
    assert!(dir.path().join("dimension/correlation.csv").exists());
}

#[test]
fn help_exits_zero_and_unknown_subcommand_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fpi(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(fpi(&["plot"], dir.path()).status.code(), Some(1));
}
