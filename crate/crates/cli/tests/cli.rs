//! End-to-end runs of the `partprompt` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gradkit::checkpoint::load_tensors;
use gradkit::Tensor;

const TINY: &str = r#"{
  "dims": {"height": 32, "width": 32, "d": 8, "d_clip": 16, "transfer_hidden": 16,
           "sparse_hidden": 8, "dense_hidden": 8, "global_hidden": 8},
  "data": {"train_samples": 8, "eval_samples": 4},
  "batch_size": 2,
  "steps": 3
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partprompt")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_is_reproducible() {
    let dir = workdir();
    let p = dir.path();
    ok(p, &["gen", "--config", "tiny.json", "--out", "a", "--seed", "1"]);
    ok(p, &["gen", "--config", "tiny.json", "--out", "b", "--seed", "1"]);
    ok(p, &["gen", "--config", "tiny.json", "--out", "c", "--seed", "2"]);
    let a = tree(&p.join("a"));
    assert_eq!(a.len(), 2 + 8 + 4);
    assert_eq!(a, tree(&p.join("b")));
    assert_ne!(a, tree(&p.join("c")));
}

#[test]
fn untrained_model_scores_poorly() {
    let dir = workdir();
    let p = dir.path();
    fs::write(p.join("untrained.json"), r#"{"steps": 0, "data": {"eval_samples": 10}}"#).unwrap();
    ok(p, &["train", "--config", "untrained.json", "--out", "run"]);
    let report: serde_json::Value = serde_json::from_str(&ok(p, &["eval", "--checkpoint", "run"])).unwrap();
    let iou = report["challenge_iou"].as_f64().unwrap();
    assert!(iou < 0.5, "{iou}");
}

#[test]
fn trained_run_reloads_with_the_same_report() {
    let dir = workdir();
    let p = dir.path();
    ok(p, &["gen", "--config", "tiny.json", "--out", "data"]);
    let trained = ok(p, &["train", "--config", "tiny.json", "--data", "data", "--out", "run", "--precision", "f64"]);
    let evaluated = ok(p, &["eval", "--checkpoint", "run/checkpoint.ppt", "--out", "report.json"]);
    assert_eq!(trained, evaluated);
    assert_eq!(fs::read_to_string(p.join("report.json")).unwrap().trim(), evaluated.trim());
}

#[test]
fn predict_writes_logits_and_binary_masks() {
    let dir = workdir();
    let p = dir.path();
    ok(p, &["train", "--config", "tiny.json", "--out", "run"]);
    ok(p, &["predict", "--checkpoint", "run", "--sample", "2", "--category", "1", "--out", "pred"]);
    let logits = load_tensors::<f32>(&p.join("pred/logits.ppt")).unwrap();
    let masks = load_tensors::<f32>(&p.join("pred/masks.ppt")).unwrap();
    let names: Vec<&str> = logits.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["whole", "parts"]);
    assert_eq!(logits[0].1.shape(), &[32, 32]);
    for ((_, l), (_, m)) in logits.iter().zip(&masks) {
        let expect: Vec<f32> = l.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(m, &Tensor::new(l.shape().to_vec(), expect).unwrap());
    }
}

#[test]
fn ablate_prints_a_table_and_writes_json() {
    let dir = workdir();
    let p = dir.path();
    let table = ok(p, &["ablate", "--config", "tiny.json", "--variants", "A,F", "--seeds", "2", "--out", "ab"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].starts_with("variant"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ab/ablation.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["variant"], "F");
    assert_eq!(rows[1]["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn gradcheck_reports_every_parameter() {
    let dir = workdir();
    let out = ok(dir.path(), &["gradcheck", "--config", "tiny.json", "--max-coords", "2"]);
    assert!(out.contains("relation.matrix"));
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn bad_usage_exits_2_and_runtime_failures_exit_1() {
    let dir = workdir();
    let p = dir.path();
    for args in [
        &["train", "--bogus"][..],
        &["frobnicate"],
        &["train", "--out", "r", "--precision", "f16"],
        &["ablate", "--variants", "Z"],
    ] {
        let out = run(p, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    fs::write(p.join("bad.json"), r#"{"batch_size": 0}"#).unwrap();
    assert_eq!(run(p, &["train", "--config", "bad.json", "--out", "r"]).status.code(), Some(2));

    assert_eq!(run(p, &["eval", "--checkpoint", "nowhere"]).status.code(), Some(1));
    assert_eq!(run(p, &["train", "--config", "missing.json", "--out", "r"]).status.code(), Some(1));
    fs::create_dir(p.join("empty")).unwrap();
    assert_eq!(run(p, &["train", "--config", "tiny.json", "--data", "empty", "--out", "r"]).status.code(), Some(1));
}
