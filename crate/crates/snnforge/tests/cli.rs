use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use snnforge::summary::RUN_SUMMARY_SCHEMA;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_snnforge"));
    // Keep the caller's environment from leaking overrides into the runs.
    for (k, _) in std::env::vars() {
        if k.starts_with("SNNFORGE__") {
            c.env_remove(k);
        }
    }
    c
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn tiny(task: &str) -> Value {
    json!({
        "task": task,
        "seed": 3,
        "data": { "train_count": 6, "test_count": 3, "size": 16 },
        "training": { "epochs": 1, "batch_size": 3 },
        "simulation": { "steps": 4, "samples": 2 },
        "finetune": { "steps": 4, "batch_size": 3, "optimizer": { "kind": "adam", "lr": 1e-4 } },
        "eval": { "models": ["ann", "converted", "finetuned"] },
        "energy": { "samples": 2 }
    })
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out-dir").arg(out).output().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn pipeline_outputs_are_deterministic_and_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny("segmentation"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&["pipeline"], &cfg, dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest, read_json(&b.join("manifest.json")));
    for name in manifest["artifacts"].as_object().unwrap().keys() {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let schema: Value = serde_json::from_str(RUN_SUMMARY_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let runs = manifest["runs"].as_object().unwrap();
    assert_eq!(runs.len(), 7);
    for rel in runs.values() {
        let path = a.join(rel.as_str().unwrap());
        let summary = read_json(&path);
        let errors: Vec<String> = validator.iter_errors(&summary).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{}: {errors:?}", path.display());
        assert_eq!(fs::read(&path).unwrap(), fs::read(b.join(rel.as_str().unwrap())).unwrap());
    }
    let metrics = read_json(&a.join("eval_metrics.json"));
    for m in ["ann", "converted", "finetuned"] {
        assert!(metrics["models"][m]["miou"].as_f64().is_some(), "{m}");
    }
    assert!(a.join("loss_curve.csv").is_file() && a.join("finetune_loss.csv").is_file());
}

#[test]
fn denoising_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny("denoising"));
    let out = tmp.path().join("out");
    let o = run(&["pipeline"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = read_json(&out.join("eval_metrics.json"));
    let psnr = metrics["models"]["ann"]["psnr"].as_f64().unwrap();
    assert!(psnr.is_finite() && psnr > 0.0);
    let energy = read_json(&out.join("energy.json"));
    assert!(energy["ann"]["ops_energy"].as_f64().unwrap() > 0.0);
    assert!(out.join("data/train/noisy/sigma25").is_dir());
}

#[test]
fn config_errors_exit_2_and_list_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny("segmentation");
    v.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(tmp.path(), &v);
    let o = run(&["train"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let mut v = tiny("segmentation");
    v["data"]["size"] = json!(20);
    v["simulation"]["steps"] = json!(0);
    let cfg = write_config(tmp.path(), &v);
    let o = run(&["train"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(err.contains("data.size") && err.contains("simulation.steps"), "{err}");

    let cfg = write_config(tmp.path(), &tiny("segmentation"));
    let o = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--override", "nonsense"])
        .arg("--out-dir")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny("segmentation"));
    let out = tmp.path().join("out");
    let o = run(&["eval"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["gen-synthetic"], &cfg, &out);
    assert!(o.status.success());
    let o = run(&["convert"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing artifact"));
}

#[test]
fn divergent_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny("segmentation");
    v["training"]["optimizer"] = json!({ "kind": "sgd", "lr": 1e200, "momentum": 0.0 });
    v["training"]["epochs"] = json!(3);
    let cfg = write_config(tmp.path(), &v);
    let out = tmp.path().join("out");
    assert!(run(&["gen-synthetic"], &cfg, &out).status.success());
    let o = run(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn environment_then_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny("segmentation"));
    let out = tmp.path().join("out");
    let o = bin()
        .env("SNNFORGE__DATA__TEST_COUNT", "2")
        .env("SNNFORGE__DATA__TRAIN_COUNT", "4")
        .args(["gen-synthetic", "--config"])
        .arg(&cfg)
        .args(["--override", "data.train_count=5", "--out-dir"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("runs/gen-synthetic.json"));
    assert_eq!(s["metrics"]["train_count"], json!(5));
    assert_eq!(s["metrics"]["test_count"], json!(2));
    assert_eq!(fs::read_dir(out.join("data/train/images")).unwrap().count(), 5);
}
