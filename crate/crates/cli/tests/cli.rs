//! End-to-end checks of the `hetfed` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hetfed");

const QUICK: &str = "\
rounds: 6
clients:
  total: 8
  per_round: 3
  local_epochs: 2
model:
  hidden: 16
  depth: 2
search:
  ratios: [0, 0.5, 1]
distill:
  t_skd: 10
limitation:
  memory:
    min: 0.00002
    max: 0.0001
  bandwidth:
    min: 0.1
    max: 1.0
data:
  in_dim: 16
  per_class: 30
optimizer:
  lr: 0.03
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.yaml");
    fs::write(&path, text).unwrap();
    path
}

fn hetfed(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_key_exits_2_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rounds: 3\nlimittion:\n  memory:\n    min: 1\n");
    let out = hetfed(&["run", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("limittion"), "{err}");
}

#[test]
fn same_seed_gives_identical_metrics_and_summary_has_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let o = dir.path().join(name);
        let out = hetfed(&["run", s(&cfg), "--seed", "3", "--out", s(&o)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        metrics.push(fs::read(o.join("metrics.csv")).unwrap());
        let summary: serde_json::Value = serde_json::from_slice(&fs::read(o.join("summary.json")).unwrap()).unwrap();
        let acc = summary["final_accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(o.join("assignments.csv").exists() && o.join("config.yaml").exists());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn checkpoint_round_trip_resumes_from_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let ckpt = dir.path().join("model.json");
    let first = hetfed(&["run", s(&cfg), "--out", s(&dir.path().join("a")), "--save-checkpoint", s(&ckpt)]);
    assert!(first.status.success());
    let second = hetfed(&["run", s(&cfg), "--out", s(&dir.path().join("b")), "--load-checkpoint", s(&ckpt)]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
}

#[test]
fn compare_needs_two_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = hetfed(&["compare", s(&cfg), "--strategies", "flexible_search", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let bad = hetfed(&["compare", s(&cfg), "--strategies", "flexible_search,nope", "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn repeated_strategy_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let o = dir.path().join("cmp");
    let out = hetfed(&["compare", s(&cfg), "--strategies", "uniform_prune,uniform_prune", "--out", s(&o)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(o.join("compare.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn sweep_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let o = dir.path().join("sw");
    let out = hetfed(&["sweep", s(&cfg), "--epsilon", "0.5,0.8", "--tmax", "1,3,5", "--out", s(&o)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(o.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    // Within each epsilon the hit rate falls as t_max grows.
    let col = reader.headers().unwrap().iter().position(|h| h == "hit_rate").unwrap();
    for chunk in rows.chunks(3) {
        let rates: Vec<f64> = chunk.iter().map(|r| r[col].parse().unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(BIN)
        .args(["run", "missing.yaml"])
        .env("HETFED_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

/// Paired run of the two fixed-architecture baselines under budgets every
/// model fits, on the shipped desk configuration.
#[test]
fn largest_model_is_at_least_as_accurate_as_smallest() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.yaml");
    let text = fs::read_to_string(shipped).unwrap();
    let text = text
        .replace("    min: 0.00012\n    max: 0.00042", "    min: 1000\n    max: 1000")
        .replace("    min: 0.2\n    max: 2.0", "    min: 100000\n    max: 100000");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &text);
    let o = dir.path().join("cmp");
    let out = hetfed(&["compare", s(&cfg), "--strategies", "fedavg_largest,fedavg_smallest", "--out", s(&o)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(o.join("compare.csv")).unwrap();
    let col = reader.headers().unwrap().iter().position(|h| h == "final_accuracy").unwrap();
    let acc: Vec<f64> = reader.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert!(acc[0] >= acc[1], "largest {} vs smallest {}", acc[0], acc[1]);
}
