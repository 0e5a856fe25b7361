use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_dora-lab");

fn default_config() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("DORA_LAB_SEED")
        .env_remove("DORA_LAB_INJECT_FAULT")
        .output()
        .unwrap()
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "exit {:?}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn manifest(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn file_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn data_rows(csv: &Path) -> usize {
    let text = std::fs::read_to_string(csv).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn generate_writes_three_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&run(&["generate"], &config, &a));
    ok(&run(&["generate"], &config, &b));
    let files = file_bytes(&a);
    let names: Vec<&str> = files.keys().map(String::as_str).collect();
    assert_eq!(names, ["dataset.json", "generate_manifest.json", "world.json"]);
    assert_eq!(files, file_bytes(&b));
    let m = manifest(&a.join("generate_manifest.json"));
    assert_eq!(m["files"].as_object().unwrap().len(), 2);
}

#[test]
fn mixture_weights_must_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg["mixture"]["alpha"] = 0.6.into();
    let config = write_config(tmp.path(), "c.json", &cfg);
    let out = run(&["generate"], &config, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mixture.alpha"), "{stderr}");
    assert!(!tmp.path().join("o/world.json").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg["train"]["learning_rate"] = 0.1.into();
    let config = write_config(tmp.path(), "c.json", &cfg);
    let out = run(&["generate"], &config, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_without_generated_data_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let out = run(&["train"], &config, &tmp.path().join("empty"));
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn train_rejects_data_from_another_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let out = tmp.path().join("o");
    ok(&run(&["generate"], &config, &out));
    let mut other = default_config();
    other["dataset_size"] = 500.into();
    let other = write_config(tmp.path(), "d.json", &other);
    assert_eq!(run(&["train"], &other, &out).status.code(), Some(2));
}

#[test]
fn train_and_eval_write_artifacts_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg["train"]["corruption_rate"] = 0.4.into();
    let config = write_config(tmp.path(), "c.json", &cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&run(&["generate"], &config, dir));
        ok(&run(&["train"], &config, dir));
    }
    for name in [
        "classifiers.json",
        "reference.json",
        "calibration.csv",
        "policy.json",
        "train_steps.csv",
        "train_epochs.csv",
        "train_manifest.json",
    ] {
        assert!(a.join(name).exists(), "{name}");
    }
    let ma = manifest(&a.join("train_manifest.json"));
    let mb = manifest(&b.join("train_manifest.json"));
    assert_eq!(ma["files"]["policy.json"], mb["files"]["policy.json"]);
    assert_eq!(file_bytes(&a), file_bytes(&b));

    let corrupted = ma["details"]["corrupted_indices"].as_array().unwrap();
    assert_eq!(corrupted.len(), 800);
    assert_eq!(ma["details"]["corruption_rate"], cfg["train"]["corruption_rate"]);

    ok(&run(&["eval"], &config, &a));
    let report = manifest(&a.join("eval.json"));
    assert!(report["provenance"]["config_hash"].is_string());
    roxmltree::Document::parse(&std::fs::read_to_string(a.join("scatter.svg")).unwrap()).unwrap();
}

#[test]
fn overflowing_training_exits_with_numeric_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = default_config();
    cfg["train"]["loss"]["beta"] = 1e300.into();
    cfg["train"]["step_size"] = 1e300.into();
    let config = write_config(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("o");
    ok(&run(&["generate"], &config, &out));
    let result = run(&["train"], &config, &out);
    assert_eq!(result.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("step"), "{stderr}");
    assert!(!out.join("policy.json").exists());
}

#[test]
fn every_output_carries_config_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let out = tmp.path().join("o");
    ok(&run(&["generate"], &config, &out));
    ok(&run(&["train"], &config, &out));
    let m = manifest(&out.join("train_manifest.json"));
    let hash = m["config_hash"].as_str().unwrap().to_string();
    let seed = m["seed"].as_u64().unwrap();
    for (name, bytes) in file_bytes(&out) {
        let text = String::from_utf8(bytes).unwrap();
        if name.ends_with(".csv") {
            assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash} seed={seed}"), "{name}");
        } else if name != "generate_manifest.json" && name != "train_manifest.json" {
            let v: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["provenance"]["config_hash"], hash.as_str(), "{name}");
            assert_eq!(v["provenance"]["seed"].as_u64(), Some(seed), "{name}");
        }
    }
}

#[test]
fn verify_passes_and_reports_each_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let out = tmp.path().join("o");
    ok(&run(&["verify"], &config, &out));
    assert_eq!(data_rows(&out.join("verify_gaps.csv")), 1000);
    let report = manifest(&out.join("verify_report.json"));
    assert!(report["failures"].as_array().unwrap().is_empty());
}

#[test]
fn verify_catches_an_injected_broken_aggregator() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let out = Command::new(BIN)
        .args(["verify", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .env("DORA_LAB_INJECT_FAULT", "broken_aggregator")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn seed_override_from_environment_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let out = tmp.path().join("o");
    let status = Command::new(BIN)
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .env("DORA_LAB_SEED", "77")
        .output()
        .unwrap();
    ok(&status);
    let m = manifest(&out.join("generate_manifest.json"));
    assert_eq!(m["seed"], 77);
    assert_eq!(m["seed_source"], "environment");

    let flagged = tmp.path().join("f");
    let status = Command::new(BIN)
        .args(["generate", "--seed", "5", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&flagged)
        .env("DORA_LAB_SEED", "77")
        .output()
        .unwrap();
    ok(&status);
    let m = manifest(&flagged.join("generate_manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["seed_source"], "flag");
}

#[test]
fn interrupted_sweep_resumes_to_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &default_config());
    let clean = tmp.path().join("clean");
    let resumed = tmp.path().join("resumed");
    ok(&run(&["sweep"], &config, &clean));

    let first = run(&["sweep", "--max-cells", "37"], &config, &resumed);
    ok(&first);
    let resume = manifest(&resumed.join("RESUME.json"));
    assert_eq!(resume["remaining"].as_array().unwrap().len(), 160 - 37);
    assert!(!resumed.join("sweep.csv").exists());
    ok(&run(&["sweep"], &config, &resumed));
    assert!(!resumed.join("RESUME.json").exists());

    assert_eq!(data_rows(&clean.join("sweep.csv")), 160);
    let (a, b) = (file_bytes(&clean), file_bytes(&resumed));
    assert_eq!(a, b);
    for (name, bytes) in &a {
        if name.ends_with(".svg") {
            roxmltree::Document::parse(std::str::from_utf8(bytes).unwrap()).unwrap();
        }
    }
}
