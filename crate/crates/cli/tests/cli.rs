use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

fn kvmatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvmatch"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kvmatch(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = kvmatch(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMOKE: &str = "\
[generator]
num_docs = 20
num_test_docs = 5

[backbone]
embed_dim = 32

[graph]
d_node = 32
d_edge = 16

[train]
epochs = 2
";

/// Five documents used both for training and testing.
const MEMORIZE: &str = "\
[generator]
num_docs = 5
num_test_docs = 5
seed = 3

[train]
epochs = 150
learning_rate = 0.002
";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn first_doc(dir: &Path) -> PathBuf {
    let mut docs: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    docs.sort();
    docs.remove(0)
}

#[test]
fn gen_defaults_produce_the_full_split() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["gen"]);
    let data = tmp.path().join("data");
    assert_eq!(fs::read_dir(data.join("train")).unwrap().count(), 300);
    assert_eq!(fs::read_dir(data.join("test")).unwrap().count(), 100);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let ratio = manifest["stats"]["kv_ratio"].as_f64().unwrap();
    assert!((ratio - 0.75).abs() < 0.02, "kv_ratio {ratio}");
    assert_eq!(manifest["stats"]["num_train"], 300);
}

#[test]
fn gen_is_deterministic_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        ok(dir.path(), &["--seed", "7", "--set", "generator.num_docs=12", "gen"]);
    }
    let (ta, tb) = (tree(&a.path().join("data")), tree(&b.path().join("data")));
    assert_eq!(ta.len(), 12 + 100 + 2);
    assert_eq!(ta, tb);
    let c = TempDir::new().unwrap();
    ok(c.path(), &["--seed", "8", "--set", "generator.num_docs=12", "gen"]);
    assert_ne!(ta, tree(&c.path().join("data")));
}

#[test]
fn invalid_and_unknown_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let err = fails(tmp.path(), &["--set", "generator.kv_ratio=1.5", "gen"]);
    assert!(err.contains("generator.kv_ratio"), "{err}");
    let err = fails(tmp.path(), &["--set", "train.learning_rte=0.1", "gen"]);
    assert!(err.contains("train.learning_rte"), "{err}");
    let cfg = write_config(tmp.path(), "[graph]\nlayers = 3\n");
    let err = fails(tmp.path(), &["--config", &cfg, "gen"]);
    assert!(err.contains("layers"), "{err}");
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn smoke_training_is_quick_and_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    ok(tmp.path(), &["--config", &cfg, "gen"]);
    let start = Instant::now();
    let stdout = ok(tmp.path(), &["--config", &cfg, "train"]);
    assert!(start.elapsed() < Duration::from_secs(120), "{:?}", start.elapsed());
    assert!(stdout.contains("held-out pair F1"), "{stdout}");
    let run = tmp.path().join("run");
    assert!(run.join("model.json").is_file());
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 20);
    assert!(lines[19]["entity_f1"].is_number() && lines[18]["entity_f1"].is_null());

    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    for section in ["[generator]", "[backbone]", "[graph]", "[loss]", "[loss.focal]", "[train]", "[inference]", "[paths]"] {
        assert!(echo.contains(section), "{section} missing from echo");
    }
    assert!(echo.contains("embed_dim = 32") && echo.contains("learning_rate = 0.0005"));
}

#[test]
fn ablation_flag_reaches_the_echo() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    ok(tmp.path(), &["--config", &cfg, "--set", "generator.num_docs=3", "gen"]);
    ok(
        tmp.path(),
        &["--config", &cfg, "--set", "train.epochs=1", "--ablate", "num2vec", "--ablate", "focal", "train"],
    );
    let echo = fs::read_to_string(tmp.path().join("run/config.toml")).unwrap();
    assert!(echo.contains("use_num2vec = false"));
    assert!(echo.contains("use_focal = false"));
    assert!(echo.contains("use_kv_branch = true"));
}

#[test]
fn missing_inputs_fail() {
    let tmp = TempDir::new().unwrap();
    let err = fails(tmp.path(), &["train"]);
    assert!(err.contains("does not exist"), "{err}");
    let err = fails(tmp.path(), &["eval"]);
    assert!(err.contains("checkpoint"), "{err}");
    let err = fails(tmp.path(), &["infer", "--input", "nope.json"]);
    assert!(err.contains("checkpoint"), "{err}");
    fails(tmp.path(), &["--ablate", "everything", "gen"]);
}

#[test]
fn memorized_corpus_scores_perfectly_and_infers() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, MEMORIZE);
    ok(dir, &["--config", &cfg, "gen"]);
    let data = dir.join("data");
    fs::remove_dir_all(data.join("test")).unwrap();
    fs::create_dir(data.join("test")).unwrap();
    for entry in fs::read_dir(data.join("train")).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, data.join("test").join(path.file_name().unwrap())).unwrap();
    }
    ok(dir, &["--config", &cfg, "train"]);

    let stdout = ok(dir, &["--config", &cfg, "eval", "--per-category"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("run/eval.json")).unwrap()).unwrap();
    assert_eq!(report["pair"]["f1"], 1.0, "{stdout}");
    assert_eq!(report["entity"]["f1"], 1.0, "{stdout}");
    assert!(stdout.contains("category") && stdout.contains("micro (entity)") && stdout.contains("pairs"));
    let rows = stdout.lines().filter(|l| l.split_whitespace().count() == 5).count();
    assert!(rows >= 4, "{stdout}");

    let input = first_doc(&data.join("test"));
    let n_segments = serde_json::from_str::<Value>(&fs::read_to_string(&input).unwrap()).unwrap()["form"]
        .as_array()
        .unwrap()
        .len();
    for mapper in ["lookup", "semantic"] {
        let out = ok(dir, &["--config", &cfg, "--mapper", mapper, "infer", "--input", input.to_str().unwrap()]);
        let ids: Vec<u64> = out
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["segment_id"].as_u64().unwrap())
            .collect();
        assert_eq!(ids, (0..n_segments as u64).collect::<Vec<_>>(), "{mapper}");
    }
    let out_path = dir.join("out.jsonl");
    ok(
        dir,
        &["--config", &cfg, "infer", "--input", input.to_str().unwrap(), "--output", out_path.to_str().unwrap()],
    );
    assert_eq!(fs::read_to_string(&out_path).unwrap().lines().count(), n_segments);

    let empty = dir.join("empty.json");
    fs::write(&empty, "{\"form\": []}\n").unwrap();
    let out = ok(dir, &["--config", &cfg, "infer", "--input", empty.to_str().unwrap()]);
    assert!(out.trim().is_empty(), "{out}");
}
