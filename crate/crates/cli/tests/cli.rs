use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regerr_core::dataset::load_manifest;
use regerr_core::volume::load_volume_auto;
use serde_json::Value;

fn regerr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regerr")).args(args).env_remove("REGERR_DETERMINISTIC").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = regerr(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\nstdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three small subjects with one landmark each, native 1 mm grid.
fn cohort(dir: &Path) -> PathBuf {
    let c = dir.join("cohort");
    ok(&["synth", "--subjects", "3", "--landmarks", "1", "--dims", "40", "--blobs", "12", "--out", s(&c)]);
    c
}

fn dataset(dir: &Path, cohort: &Path, name: &str, seed: &str) -> PathBuf {
    let d = dir.join(name);
    ok(&[
        "build-dataset", "--cases", s(cohort), "--seed", seed, "--n-deformations", "2", "--patch-size", "32",
        "--spacing-mm", "0", "--out", s(&d),
    ]);
    d
}

#[test]
fn help_lists_defaults_and_annotates_published_defaults() {
    let t = ok(&["train", "--help"]);
    for needle in ["(paper) [default: 8]", "(paper) [default: 200]", "(paper) [default: 0.0001]", "(paper) [default: 0.01]"] {
        assert!(t.contains(needle), "train help lacks {needle}:\n{t}");
    }
    let s = ok(&["simulate", "--help"]);
    for needle in ["(paper) [default: 10]", "(paper) [default: 20]", "(paper) [default: 0.5]"] {
        assert!(s.contains(needle), "simulate help lacks {needle}:\n{s}");
    }
    assert!(!ok(&["selfcheck", "--help"]).contains("perturb"));
}

#[test]
fn train_without_flags_resolves_published_defaults() {
    let v: Value = serde_json::from_str(&ok(&["train", "--print-config"])).unwrap();
    let t = &v["train"];
    assert_eq!(t["batch_size"], 8);
    assert_eq!(t["epochs"], 200);
    assert_eq!(t["learning_rate"], 1e-4);
    assert_eq!(t["lambda_smooth"], 0.01);
    assert_eq!(t["optimizer"], "adamw");
    assert_eq!(v["model"]["patch_size"], 64);
    let o = regerr(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset"));
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"batch-size": 4, "epochs": 3, "lr": 0.5}"#).unwrap();
    let v: Value = serde_json::from_str(&ok(&["train", "--config", s(&cfg), "--epochs", "5", "--print-config"])).unwrap();
    assert_eq!(v["train"]["batch_size"], 4);
    assert_eq!(v["train"]["epochs"], 5);
    assert_eq!(v["train"]["learning_rate"], 0.5);

    fs::write(&cfg, r#"{"batch_sise": 4}"#).unwrap();
    let o = regerr(&["train", "--config", s(&cfg), "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_sise"));
    assert_eq!(regerr(&["train", "--batch-size", "0", "--print-config"]).status.code(), Some(2));
    assert_eq!(regerr(&["train", "--config", s(&tmp.path().join("none.json"))]).status.code(), Some(3));
}

#[test]
fn split_of_22_patients() {
    let out = ok(&["split", "--patients", "22", "--seed", "3"]);
    assert!(out.starts_with("train 13 val 4 test 5\n"), "{out}");
    assert_eq!(out, ok(&["split", "--patients", "22", "--seed", "3"]));
    assert_eq!(regerr(&["split", "--patients", "2"]).status.code(), Some(2));
    assert_eq!(regerr(&["split"]).status.code(), Some(2));
}

#[test]
fn selfcheck_is_stable_and_hook_fails() {
    let a = ok(&["selfcheck"]);
    assert_eq!(a, ok(&["selfcheck"]));
    assert_eq!(a.lines().filter(|l| l.contains(" ok ")).count(), 3, "{a}");
    let o = regerr(&["selfcheck", "--perturb-basis"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("partition-of-unity") && l.contains("FAILED")));
}

#[test]
fn simulate_writes_ten_deformations_and_handles_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cohort(tmp.path());
    let case = c.join("case01/case.json");
    let out = tmp.path().join("sim");
    ok(&["simulate", "--case", s(&case), "--spacing-mm", "0", "--max-disp-mm", "0", "--out", s(&out)]);
    for k in 0..10 {
        let d = out.join(format!("deformation_{k:02}"));
        let e = load_volume_auto(d.join("error.json")).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert!(d.join("ius_warped.json").exists() && d.join("grid.json").exists());
    }
    assert!(!out.join("deformation_10").exists());
    assert!(out.join("resolved_config.json").exists());

    let missing = tmp.path().join("nope/case.json");
    let o = regerr(&["simulate", "--case", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    let o = regerr(&["simulate", "--case", s(&case), "--max-disp-mm", "-1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_build_train_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cohort(tmp.path());
    let d = dataset(tmp.path(), &c, "ds", "7");
    let out = ok(&["build-dataset", "--cases", s(&c), "--seed", "7", "--n-deformations", "2", "--patch-size", "32", "--spacing-mm", "0", "--jobs", "2", "--out", s(&tmp.path().join("ds2"))]);
    let hash = |o: &str| o.lines().find_map(|l| l.strip_prefix("manifest sha256 ")).unwrap().to_string();
    assert_eq!(hash(&out), regerr_core::dataset::manifest_hash(&d).unwrap());
    assert_eq!(load_manifest(&d).unwrap().records.len(), 6);

    let gt = tmp.path().join("gt");
    ok(&["evaluate", "--dataset", s(&d), "--predictor", "ground-truth", "--out", s(&gt)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(gt.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["cohort_patch"]["mean"], 0.0);
    assert!(r["per_patch"].as_array().unwrap().iter().all(|p| p["mae"] == 0.0));
    assert!(fs::read_to_string(gt.join("histogram.svg")).unwrap().starts_with("<svg"));
    let md = ok(&["report", "--report", s(&gt.join("report.json"))]);
    assert!(md.contains("| **Mean** | **0.000** ± **0.000** |"), "{md}");

    let run = tmp.path().join("run");
    let train = |extra: &[&str]| {
        let mut a = vec!["train", "--dataset", s(&d), "--model", "toy", "--batch-size", "2", "--lr", "1e-3", "--out", s(&run)];
        a.extend_from_slice(extra);
        ok(&a)
    };
    train(&["--epochs", "1"]);
    for f in ["resolved_config.json", "config.json", "history.csv", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    train(&["--epochs", "2", "--resume", s(&run.join("last.ckpt"))]);
    assert_eq!(fs::read_to_string(run.join("history.csv")).unwrap().lines().count(), 3);

    let ev = tmp.path().join("ev");
    ok(&["evaluate", "--dataset", s(&d), "--checkpoint", s(&run.join("best.ckpt")), "--runtime-patches", "2", "--warmup", "0", "--out", s(&ev)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(r["cohort_patch"]["mean"].as_f64().unwrap() > 0.0);
    assert!(r["avg_runtime_s"].as_f64().unwrap() > 0.0);

    let pred = tmp.path().join("pred");
    let sub = c.join("case01");
    ok(&[
        "predict", "--checkpoint", s(&run.join("best.ckpt")), "--mri", s(&sub.join("mri.json")), "--ius",
        s(&sub.join("ius.json")), "--landmarks", s(&sub.join("landmarks.csv")), "--out", s(&pred),
    ]);
    let map = load_volume_auto(pred.join("L1.json")).unwrap();
    assert_eq!(map.dims(), [32; 3]);
    assert!(map.data().iter().all(|v| v.is_finite() && *v > 0.0));

    let o = regerr(&["predict", "--checkpoint", s(&tmp.path().join("no.ckpt")), "--mri", "a", "--ius", "b", "--out", s(&pred)]);
    assert_eq!(o.status.code(), Some(3));
}
