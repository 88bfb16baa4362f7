//! End-to-end runs of the `cmfusion` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cmfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmfusion"))
        .args(args)
        .env_remove("CMF_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_out(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset plus a run config pointing at it.
fn setup(dir: &Path, train: Value) -> std::path::PathBuf {
    let synth = dir.join("synth.json");
    fs::write(
        &synth,
        json!({
            "spec": {"d_audio": 6, "d_text": 5, "n_classes": 3, "seed": 2},
            "splits": {"train": 16, "val": 6, "test": 6}
        })
        .to_string(),
    )
    .unwrap();
    let o = cmfusion(&["synth", "--config", p(&synth), "--out", p(&dir.join("data"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let config = dir.join("run.json");
    fs::write(
        &config,
        json!({
            "model": {"d_model": 8},
            "train": train,
            "data": {"train": "data/train.jsonl", "val": "data/val.jsonl", "test": "data/test.jsonl"},
            "out_dir": "runs"
        })
        .to_string(),
    )
    .unwrap();
    config
}

#[test]
fn synth_is_reproducible_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = json_out(&cmfusion(&["--format", "json", "synth", "--out", p(&a), "--seed", "3"]));
    cmfusion(&["synth", "--out", p(&b), "--seed", "3"]);
    let splits = out["splits"].as_array().unwrap();
    assert_eq!(splits.len(), 3);
    for s in splits {
        let name = format!("{}.jsonl", s["split"].as_str().unwrap());
        let bytes = fs::read(a.join(&name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(&name)).unwrap(), "{name} differs between runs");
        // one header line plus one line per utterance
        let lines = bytes.iter().filter(|&&c| c == b'\n').count();
        assert_eq!(lines as u64, 1 + s["utterances"].as_u64().unwrap());
        let counted: u64 = s["class_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(counted, s["utterances"].as_u64().unwrap());
    }
    assert_eq!(splits[0]["dialogues"], 200);
    assert_eq!(splits[1]["dialogues"], 50);
}

#[test]
fn train_then_eval_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 3, "patience": 3, "learning_rate": 1e-3}));
    let train = json_out(&cmfusion(&["--format", "json", "train", "--config", p(&config)]));
    let ckpt = train["checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).exists());
    assert!(dir.path().join("runs/train_report.json").exists(), "{ckpt}");
    let eval = json_out(&cmfusion(&[
        "--format",
        "json",
        "eval",
        "--checkpoint",
        &ckpt,
        "--data",
        p(&dir.path().join("data/test.jsonl")),
    ]));
    assert_eq!(eval["report"], train["test"]);
    assert!(Path::new(&ckpt).with_file_name("eval_report.json").exists());

    let table = cmfusion(&["eval", "--checkpoint", &ckpt, "--data", p(&dir.path().join("data/val.jsonl"))]);
    assert_eq!(code(&table), 0);
    assert!(String::from_utf8_lossy(&table.stdout).contains("w-average F1"));
}

#[test]
fn damaged_checkpoint_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 1, "patience": 1}));
    let train = json_out(&cmfusion(&["--format", "json", "train", "--config", p(&config)]));
    let ckpt = train["checkpoint"].as_str().unwrap().to_string();
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let o = cmfusion(&["eval", "--checkpoint", &ckpt, "--data", p(&dir.path().join("data/test.jsonl"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 1, "patience": 1}));
    let train = json_out(&cmfusion(&["--format", "json", "train", "--config", p(&config)]));
    let other = dir.path().join("other");
    let synth = dir.path().join("other.json");
    fs::write(&synth, json!({"spec": {"d_audio": 7, "d_text": 5, "n_classes": 3}, "splits": {"train": 2, "val": 2, "test": 2}}).to_string())
        .unwrap();
    cmfusion(&["synth", "--config", p(&synth), "--out", p(&other)]);
    let o = cmfusion(&["eval", "--checkpoint", train["checkpoint"].as_str().unwrap(), "--data", p(&other.join("test.jsonl"))]);
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(msg.contains('6') && msg.contains('7'), "{msg}");
}

#[test]
fn missing_training_file_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 1, "patience": 1}));
    fs::remove_file(dir.path().join("data/train.jsonl")).unwrap();
    let o = cmfusion(&["train", "--config", p(&config)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("train.jsonl"), "{}", stderr(&o));
}

#[test]
fn configuration_mistakes_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 1, "patience": 1}));
    let o = cmfusion(&["train", "--config", p(&config), "--variant", "no-such-variant"]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, json!({"spec": {"n_classes": 1}}).to_string()).unwrap();
    assert_eq!(code(&cmfusion(&["synth", "--config", p(&bad), "--out", p(dir.path())])), 2);

    assert_eq!(code(&cmfusion(&["train", "--config", p(&dir.path().join("absent.json"))])), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_cmfusion"))
        .args(["gradcheck"])
        .env("CMF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_is_a_numerical_error_naming_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 5, "patience": 5, "learning_rate": 1e300}));
    let o = cmfusion(&["train", "--config", p(&config)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn gradcheck_catches_an_injected_fault() {
    let o = cmfusion(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("gradient check failed"));
    assert_eq!(code(&cmfusion(&["gradcheck", "--inject-fault", "nonsense"])), 2);
}

#[test]
fn ablate_lists_each_variant_once() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), json!({"max_epochs": 2, "patience": 2}));
    let o = cmfusion(&[
        "--format",
        "json",
        "ablate",
        "--config",
        p(&config),
        "--variants",
        "no-sca,full,no-sca,text-only",
        "--seeds",
        "2",
    ]);
    let out = json_out(&o);
    let rows = out["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no-sca", "text-only"]);
    for r in rows {
        assert_eq!(r["runs"].as_array().unwrap().len(), 2);
    }
    assert!(dir.path().join("runs/ablation_report.json").exists());
}
