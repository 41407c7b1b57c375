mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use habench::harmonize::{FitOptions, FittedHarmonizer, HarmonizationMethod, MethodRegistry};
use habench::{read_volume, write_volume, DesignMatrix, ElementType, Volume, VolumeGeometry, VoxelDataset};

fn habench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_habench"))
        .args(args)
        .env_remove("HABENCH_THREADS")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_error(out: &Output, needle: &str) {
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(out));
    let err = stderr(out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains(needle), "expected {needle:?} in {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "seed": 7,
  "dims": [6, 6, 4],
  "mask_shape": {"centered_box": 0.8},
  "sites": [
    {"label": "A", "n_images": 6, "gamma_scale": 0.2, "delta_scale": 1.2},
    {"label": "B", "n_images": 6, "gamma_scale": 0.2, "delta_scale": 0.9, "global_gain": 1.1},
    {"label": "C", "n_images": 5, "gamma_scale": 0.2, "delta_scale": 1.0, "global_offset": 0.05}
  ],
  "covariates": {"age_range": [9, 11], "age_effect": 0.01, "sex_effect": 0.005},
  "noise_sd": 0.05,
  "affected_fraction": 0.5
}"#;

fn bundle(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let out = dir.join("bundle");
    let res = habench(&["synth", "--spec", s(&spec), "--out", s(&out)]);
    assert!(res.status.success(), "{}", stderr(&res));
    out
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn harmonize(b: &Path, cfg: &Path, out: &Path) -> Output {
    habench(&[
        "harmonize",
        "--table", s(&b.join("samples.csv")),
        "--mask", s(&b.join("mask.nii.gz")),
        "--config", s(cfg),
        "--out", s(out),
    ])
}

fn report(table: &Path, mask: &Path, alpha: &str, out: &Path) -> Output {
    habench(&["report", "--table", s(table), "--mask", s(mask), "--alpha", alpha, "--out", s(out)])
}

#[test]
fn synth_writes_a_complete_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path());
    for f in ["samples.csv", "mask.nii.gz", "ground_truth.json", "images/A_000.nii.gz", "images/C_004.nii.gz"] {
        assert!(b.join(f).exists(), "{f}");
    }
    let rows = fs::read_to_string(b.join("samples.csv")).unwrap().lines().count();
    assert_eq!(rows, 18);
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(".habench"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    let again = habench(&["synth", "--spec", s(&dir.path().join("spec.json")), "--out", s(&b)]);
    assert_error(&again, "already exists");
}

#[test]
fn synth_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "bad.json", "{\n  \"seed\": 1,\n  \"dims\": [4, 4, 4,\n}");
    assert_error(&habench(&["synth", "--spec", s(&bad), "--out", s(&dir.path().join("o"))]), "byte offset");

    let spec = config(dir.path(), "spec.json", SMALL_SPEC);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = habench(&["synth", "--spec", s(&spec), "--out", s(&blocker.join("sub"))]);
    assert_error(&out, "file");
    assert!(!blocker.join("sub").exists());

    let invalid = config(dir.path(), "invalid.json", &SMALL_SPEC.replace("\"noise_sd\": 0.05", "\"noise_sd\": 0"));
    assert_error(&habench(&["synth", "--spec", s(&invalid), "--out", s(&dir.path().join("o2"))]), "noise_sd");
}

#[test]
fn harmonize_none_copies_data() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path());
    let cfg = config(dir.path(), "none.json", r#"{"method": "none"}"#);
    let out = dir.path().join("h");
    let res = harmonize(&b, &cfg, &out);
    assert!(res.status.success(), "{}", stderr(&res));
    for name in ["images/A_000.nii.gz", "images/B_003.nii.gz"] {
        let a = read_volume(b.join(name)).unwrap();
        let h = read_volume(out.join(name)).unwrap();
        assert_eq!(a.data, h.data);
        assert_eq!(a.geometry, h.geometry);
    }
    assert!(out.join("model.json").exists());
    assert!(out.join("samples.csv").exists());
}

#[test]
fn harmonize_is_idempotent_and_apply_reuses_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path());
    let cfg = config(
        dir.path(),
        "combat.json",
        r#"{"method": "combat", "covariates": ["age", "sex"], "combat_eb": true}"#,
    );
    let (h1, h2) = (dir.path().join("h1"), dir.path().join("h2"));
    assert!(harmonize(&b, &cfg, &h1).status.success());
    assert!(harmonize(&b, &cfg, &h2).status.success());
    for f in ["model.json", "samples.csv", "images/A_001.nii.gz"] {
        assert_eq!(fs::read(h1.join(f)).unwrap(), fs::read(h2.join(f)).unwrap(), "{f}");
    }

    let applied = dir.path().join("applied");
    let res = habench(&[
        "apply",
        "--table", s(&b.join("samples.csv")),
        "--mask", s(&b.join("mask.nii.gz")),
        "--model", s(&h1.join("model.json")),
        "--out", s(&applied),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(
        fs::read(h1.join("images/C_002.nii.gz")).unwrap(),
        fs::read(applied.join("images/C_002.nii.gz")).unwrap()
    );
}

/// Hand-built study: `values[n]` fills every voxel of image n.
fn flat_study(dir: &Path, sites: &[&str], values: &[Vec<f64>]) -> (PathBuf, PathBuf) {
    let g = VolumeGeometry::with_spacing([values[0].len(), 1, 1], [1.0; 3]).unwrap();
    let mut csv = String::from("image,site\n");
    for (n, (site, data)) in sites.iter().zip(values).enumerate() {
        let name = format!("img{n}.nii");
        write_volume(&Volume::new(g.clone(), data.clone()).unwrap(), dir.join(&name), ElementType::Float64).unwrap();
        csv.push_str(&format!("{name},{site}\n"));
    }
    let table = dir.join("samples.csv");
    fs::write(&table, csv).unwrap();
    let mask = dir.join("mask.nii");
    write_volume(&Volume::new(g, vec![1.0; values[0].len()]).unwrap(), &mask, ElementType::Float32).unwrap();
    (table, mask)
}

#[test]
fn combat_single_site_is_near_identity() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<Vec<f64>> = (0..6).map(|n| (0..5).map(|v| (n * 7 + v * 3) as f64 % 5.0 + 0.1 * v as f64).collect()).collect();
    let (table, mask) = flat_study(dir.path(), &["A"; 6], &values);
    let cfg = config(dir.path(), "c.json", r#"{"method": "combat", "combat_eb": false}"#);
    let out = dir.path().join("h");
    let res = habench(&["harmonize", "--table", s(&table), "--mask", s(&mask), "--config", s(&cfg), "--out", s(&out)]);
    assert!(res.status.success(), "{}", stderr(&res));
    for (n, want) in values.iter().enumerate() {
        let got = read_volume(out.join(format!("img{n}.nii"))).unwrap();
        for (a, b) in got.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn global_scaling_constant_grand_mean_fails() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<Vec<f64>> = (0..4).map(|n| vec![n as f64 + 1.0; 5]).collect();
    let (table, mask) = flat_study(dir.path(), &["A", "A", "B", "B"], &values);
    let cfg = config(dir.path(), "g.json", r#"{"method": "global_scaling"}"#);
    let out = habench(&[
        "harmonize", "--table", s(&table), "--mask", s(&mask), "--config", s(&cfg), "--out", s(&dir.path().join("h")),
    ]);
    assert_error(&out, "zero regressor variance");
}

#[test]
fn harmonize_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path());
    let unknown = config(dir.path(), "u.json", r#"{"method": "magic"}"#);
    assert_error(&harmonize(&b, &unknown, &dir.path().join("h")), "combat");
    let no_out = config(dir.path(), "n.json", r#"{"method": "none"}"#);
    let res = habench(&[
        "harmonize", "--table", s(&b.join("samples.csv")), "--mask", s(&b.join("mask.nii.gz")), "--config", s(&no_out),
    ]);
    assert_error(&res, "output directory");
    let with_out = config(
        dir.path(),
        "w.json",
        &format!(r#"{{"method": "none", "output_dir": "{}"}}"#, s(&dir.path().join("from_config"))),
    );
    let res = habench(&[
        "harmonize", "--table", s(&b.join("samples.csv")), "--mask", s(&b.join("mask.nii.gz")), "--config", s(&with_out),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(dir.path().join("from_config/model.json").exists());
}

#[test]
fn report_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path());
    let mask = b.join("mask.nii.gz");
    let none_cfg = config(dir.path(), "none.json", r#"{"method": "none"}"#);
    let combat_cfg = config(dir.path(), "combat.json", r#"{"method": "combat", "covariates": ["age", "sex"]}"#);
    let mut reports = Vec::new();
    for (label, cfg) in [("none", &none_cfg), ("combat", &combat_cfg)] {
        let h = dir.path().join(format!("h_{label}"));
        assert!(harmonize(&b, cfg, &h).status.success());
        let r = dir.path().join(format!("r_{label}"));
        let res = report(&h.join("samples.csv"), &mask, "0.05", &r);
        assert!(res.status.success(), "{}", stderr(&res));
        for f in ["anova.csv", "pairwise.csv", "summary.json", "eta2_hist.csv", "sig_F.nii.gz", "eta2.nii.gz", "t_fraction.nii.gz"] {
            assert!(r.join(f).exists(), "{f}");
        }
        reports.push(format!("{label}={}", s(&r)));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r_none/summary.json")).unwrap()).unwrap();
    for key in ["V", "S", "P", "alpha", "f_threshold", "t_threshold", "n_F", "f_F", "n_t", "f_t"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    let v = summary["V"].as_u64().unwrap() as usize;
    let anova = fs::read_to_string(dir.path().join("r_none/anova.csv")).unwrap();
    assert_eq!(anova.lines().count(), v + 1);

    let cmp = dir.path().join("cmp");
    let res = habench(&["compare", "--reports", &reports[0], &reports[1], "--out", s(&cmp)]);
    assert!(res.status.success(), "{}", stderr(&res));
    let printed = String::from_utf8_lossy(&res.stdout);
    assert_eq!(printed.lines().count(), 3);
    let csv = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("none,"));

    let res = habench(&["compare", "--reports", &reports[0], "--out", s(&cmp)]);
    assert!(res.status.success());
    assert_eq!(fs::read_to_string(cmp.join("comparison.csv")).unwrap().lines().count(), 2);

    // A report over a smaller mask has a different V.
    let values: Vec<Vec<f64>> = (0..4).map(|n| vec![n as f64, 1.0, 2.0]).collect();
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let (t, m) = flat_study(&other, &["A", "A", "B", "B"], &values);
    assert!(report(&t, &m, "0.05", &other.join("r")).status.success());
    let res = habench(&["compare", "--reports", &reports[0], &format!("x={}", s(&other.join("r"))), "--out", s(&cmp)]);
    assert_error(&res, "V =");
}

#[test]
fn report_errors() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(dir.path());
    let out = dir.path().join("r");
    assert_error(&report(&b.join("samples.csv"), &b.join("mask.nii.gz"), "1.5", &out), "alpha");
    let missing = dir.path().join("nope.nii.gz");
    assert_error(&report(&b.join("samples.csv"), &missing, "0.05", &out), s(&missing));
    assert_error(&habench(&["report", "--table", s(&b.join("samples.csv"))]), "required");
    assert_error(&habench(&["compare", "--reports", &format!("a={}", s(&out)), "--out", s(&out)]), "summary.json");
}

#[test]
fn thread_setting_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let spec = config(dir.path(), "spec.json", SMALL_SPEC);
    let out = Command::new(env!("CARGO_BIN_EXE_habench"))
        .args(["synth", "--spec", s(&spec), "--out", s(&dir.path().join("o"))])
        .env("HABENCH_THREADS", "lots")
        .output()
        .unwrap();
    assert_error(&out, "HABENCH_THREADS");
    assert_error(&habench(&["--threads", "0", "synth", "--spec", s(&spec), "--out", s(&dir.path().join("o"))]), "at least 1");
}

#[derive(Debug)]
struct Halve;

impl FittedHarmonizer for Halve {
    fn apply(&self, dataset: &VoxelDataset, _: &DesignMatrix) -> habench::Result<ndarray::Array2<f64>> {
        Ok(dataset.values() * 0.5)
    }
    fn params(&self) -> serde_json::Value {
        serde_json::json!({})
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

struct HalveMethod;

impl HarmonizationMethod for HalveMethod {
    fn fit(&self, _: &VoxelDataset, _: &DesignMatrix, _: &FitOptions) -> habench::Result<Box<dyn FittedHarmonizer>> {
        Ok(Box::new(Halve))
    }
}

#[test]
fn registered_method_runs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<Vec<f64>> = (0..4).map(|n| vec![n as f64 + 1.0, 2.0, 4.0]).collect();
    let (table, mask) = flat_study(dir.path(), &["A", "A", "B", "B"], &values);
    let cfg = config(dir.path(), "m.json", r#"{"method": "mymethod"}"#);
    let out = dir.path().join("h");
    let args = ["habench", "harmonize", "--table", s(&table), "--mask", s(&mask), "--config", s(&cfg), "--out", s(&out)];

    let builtins = MethodRegistry::with_builtins();
    assert_eq!(habench::cli::main_with_registry(args, &builtins), 1);

    let mut registry = MethodRegistry::with_builtins();
    registry.register("mymethod", Arc::new(HalveMethod)).unwrap();
    assert!(registry.register("mymethod", Arc::new(HalveMethod)).is_err());
    assert_eq!(habench::cli::main_with_registry(args, &registry), 0);
    let got = read_volume(out.join("img3.nii")).unwrap();
    assert_eq!(got.data, vec![2.0, 1.0, 2.0]);
}
