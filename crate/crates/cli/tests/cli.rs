use std::path::Path;
use std::process::{Command, Output};

fn vqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = vqa(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(vqa(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let out = vqa(&["eval", "--manifest", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn encode_mos_prints_the_target_vector() {
    let out = vqa(&["encode-mos", "3.0"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let y: Vec<f64> = serde_json::from_value(v["encoding"].clone()).unwrap();
    let expected = [0.01033, 0.20756, 0.56421, 0.20756, 0.01033];
    for (a, b) in y.iter().zip(expected) {
        assert!((a - b).abs() < 1e-5, "{y:?}");
    }
}

#[test]
fn encode_mos_out_of_scale_is_rejected() {
    assert_eq!(vqa(&["encode-mos", "7"]).status.code(), Some(1));
}

#[test]
fn missing_manifest_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = vqa(&[
        "train",
        "--manifest",
        dir.path().join("none.jsonl").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sampled_gradcheck_passes() {
    let out = vqa(&["gradcheck", "--entries", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = stdout_json(&out);
    assert_eq!(v["pass"], true);
    let modules = v["modules"].as_object().unwrap();
    for m in ["fpt", "frame_ingest", "sat", "vat"] {
        assert!(modules.contains_key(m), "{m} missing from {modules:?}");
    }
    assert!(!modules.contains_key("text"));
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let out = vqa(&["gen-data", "--count", "20", "--frames", "8", "--seed", "3", "--out", &s(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = data.join("manifest.jsonl");
    assert_eq!(lines(&manifest).len(), 20);

    let out = vqa(&["train", "--manifest", &s(&manifest), "--epochs", "2", "--out", &s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&run.join("train_log.jsonl")).len(), 2);
    for f in ["last.ckpt", "best.ckpt", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let csv = dir.path().join("pairs.csv");
    let ckpt = s(&run.join("last.ckpt"));
    let out = vqa(&["eval", "--checkpoint", &ckpt, "--manifest", &s(&manifest), "--csv", &s(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["count"], 4);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("id,pred,label\n"));
    assert_eq!(text.lines().count(), 5);

    let out = vqa(&["eval", "--checkpoint", &ckpt, "--manifest", &s(&manifest), "--all", "--decode", "svr"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["count"], 20);

    let out = vqa(&["predict", "--checkpoint", &ckpt, "--manifest", &s(&manifest)]);
    assert_eq!(out.status.code(), Some(0));
    let records: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 20);
    let probs: Vec<f64> = serde_json::from_value(records[0]["probs"].clone()).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}
