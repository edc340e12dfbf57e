//! End-to-end runs of the `hfan` binary through its public flags.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn hfan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hfan"))
}

fn run(args: &[&str]) -> Output {
    hfan().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "hfan {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn line_count(path: &Path) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().count()
}

struct Corpus {
    _dir: TempDir,
    train: PathBuf,
    valid: PathBuf,
    test: PathBuf,
}

impl Corpus {
    /// Generates a small synthetic corpus inside a fresh tempdir.
    fn new(n_reviews: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.jsonl");
        let valid = dir.path().join("valid.jsonl");
        let test = dir.path().join("test.jsonl");
        run_ok(&[
            "synth",
            "--train",
            train.to_str().unwrap(),
            "--valid",
            valid.to_str().unwrap(),
            "--test",
            test.to_str().unwrap(),
            "--n-reviews",
            &n_reviews.to_string(),
            "--n-users",
            "20",
            "--n-products",
            "10",
            "--seed",
            &seed.to_string(),
        ]);
        Corpus { _dir: dir, train, valid, test }
    }

    fn path_of<'a>(&self, file: &'a Path) -> &'a str {
        file.to_str().unwrap()
    }

    /// Trains a small model and returns the checkpoint path.
    fn train_small(&self, name: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self._dir.path().join(name);
        let mut args = vec![
            "train",
            "--train",
            self.path_of(&self.train),
            "--valid",
            self.path_of(&self.valid),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--d",
            "4",
            "--L",
            "4",
            "--T",
            "12",
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--min-count",
            "1",
        ];
        args.extend_from_slice(extra);
        run_ok(&args);
        ckpt
    }
}

#[test]
fn synth_writes_split_files_and_a_summary_line() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.jsonl");
    let valid = dir.path().join("valid.jsonl");
    let test = dir.path().join("test.jsonl");
    let args = [
        "synth",
        "--train",
        train.to_str().unwrap(),
        "--valid",
        valid.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--n-reviews",
        "1000",
        "--seed",
        "7",
    ];
    let stdout = run_ok(&args);

    assert_eq!(line_count(&train), 800);
    assert_eq!(line_count(&valid), 100);
    assert_eq!(line_count(&test), 100);
    let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["train"], 800);
    assert_eq!(summary["valid"], 100);
    assert_eq!(summary["test"], 100);
    assert_eq!(summary["spam"], 200);

    // Same seed, same bytes.
    let first = std::fs::read(&train).unwrap();
    run_ok(&args);
    assert_eq!(std::fs::read(&train).unwrap(), first);
}

#[test]
fn synth_rejects_an_out_of_range_spam_rate() {
    let out = run(&["synth", "--spam-rate", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spam-rate"));
}

#[test]
fn train_writes_a_checkpoint_even_with_zero_epochs() {
    let corpus = Corpus::new(60, 3);
    let ckpt = corpus._dir.path().join("zero.ckpt");
    let stdout = run_ok(&[
        "train",
        "--train",
        corpus.path_of(&corpus.train),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--d",
        "4",
        "--epochs",
        "0",
        "--min-count",
        "1",
    ]);
    assert!(stdout.is_empty());
    assert!(ckpt.exists());
}

#[test]
fn train_logs_one_record_per_epoch() {
    let corpus = Corpus::new(120, 3);
    corpus.train_small("model.ckpt", &[]);
    let ckpt = corpus._dir.path().join("again.ckpt");
    let stdout = run_ok(&[
        "train",
        "--train",
        corpus.path_of(&corpus.train),
        "--valid",
        corpus.path_of(&corpus.valid),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--d",
        "4",
        "--L",
        "4",
        "--T",
        "12",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--min-count",
        "1",
    ]);
    let records: Vec<Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 2);
    for (i, rec) in records.iter().enumerate() {
        assert_eq!(rec["epoch"], i as u64);
        for key in ["ce", "relation", "total", "lr"] {
            assert!(rec[key].is_f64(), "missing {key}");
        }
        assert!(rec["val_f1"].is_f64(), "validation split was provided");
    }
}

#[test]
fn train_with_beta_zero_reports_no_relation_loss() {
    let corpus = Corpus::new(60, 3);
    let ckpt = corpus._dir.path().join("nobeta.ckpt");
    let stdout = run_ok(&[
        "train",
        "--train",
        corpus.path_of(&corpus.train),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--d",
        "4",
        "--L",
        "4",
        "--T",
        "12",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--min-count",
        "1",
        "--beta",
        "0",
    ]);
    for line in stdout.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["relation"].as_f64().unwrap(), 0.0);
        assert_eq!(rec["total"], rec["ce"]);
    }
}

#[test]
fn eval_output_is_stable_across_runs() {
    let corpus = Corpus::new(120, 3);
    let ckpt = corpus.train_small("model.ckpt", &[]);
    let args = [
        "eval",
        "--train",
        corpus.path_of(&corpus.train),
        "--test",
        corpus.path_of(&corpus.test),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    let first = run_ok(&args);
    let second = run_ok(&args);
    assert_eq!(first, second);
    let report: Value = serde_json::from_str(first.trim()).unwrap();
    assert!(report["f1"].is_f64());

    let csv = run_ok(&[
        "eval",
        "--train",
        corpus.path_of(&corpus.train),
        "--test",
        corpus.path_of(&corpus.test),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--emit",
        "csv",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "dataset,P,R,F1,AP,AUC,n,seed");
    assert!(lines[2].starts_with(corpus.path_of(&corpus.test)));
}

#[test]
fn predictions_cover_the_scored_split_and_match_the_report() {
    let corpus = Corpus::new(120, 3);
    let ckpt = corpus.train_small("model.ckpt", &[]);
    let report: Value = serde_json::from_str(
        run_ok(&[
            "eval",
            "--train",
            corpus.path_of(&corpus.train),
            "--test",
            corpus.path_of(&corpus.test),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ])
        .trim(),
    )
    .unwrap();

    let stdout = run_ok(&[
        "predict",
        "--train",
        corpus.path_of(&corpus.train),
        "--test",
        corpus.path_of(&corpus.test),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let preds: Vec<Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(preds.len(), line_count(&corpus.test));
    for p in &preds {
        assert!(p["review_id"].is_string());
        let score = p["spam_score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&score));
    }
    let flagged = preds
        .iter()
        .filter(|p| p["predicted_label"] == 1)
        .count() as u64;
    let from_report = report["tp"].as_u64().unwrap() + report["fp"].as_u64().unwrap();
    assert_eq!(flagged, from_report);
}

#[test]
fn predict_on_an_empty_split_prints_nothing() {
    let corpus = Corpus::new(60, 3);
    let ckpt = corpus.train_small("model.ckpt", &[]);
    let empty = corpus._dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let stdout = run_ok(&[
        "predict",
        "--train",
        corpus.path_of(&corpus.train),
        "--test",
        empty.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(stdout.is_empty());
}

#[test]
fn eval_refuses_a_mismatched_vocabulary() {
    let corpus = Corpus::new(120, 3);
    let ckpt = corpus.train_small("model.ckpt", &[]);
    // A corpus with a different entity pool cannot share the checkpoint's
    // embedding tables.
    let dir = tempfile::tempdir().unwrap();
    let other_train = dir.path().join("train.jsonl");
    run_ok(&[
        "synth",
        "--train",
        other_train.to_str().unwrap(),
        "--valid",
        dir.path().join("valid.jsonl").to_str().unwrap(),
        "--test",
        dir.path().join("test.jsonl").to_str().unwrap(),
        "--n-reviews",
        "120",
        "--n-users",
        "13",
        "--n-products",
        "7",
        "--seed",
        "9",
    ]);
    let out = run(&[
        "eval",
        "--train",
        other_train.to_str().unwrap(),
        "--test",
        corpus.path_of(&corpus.test),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
    assert!(stderr.contains("vocabulary"), "stderr: {stderr}");
}

#[test]
fn cv_prints_the_fold_table_and_selection() {
    let corpus = Corpus::new(60, 3);
    let stdout = run_ok(&[
        "cv",
        "--train",
        corpus.path_of(&corpus.train),
        "--d",
        "4",
        "--L",
        "4",
        "--T",
        "12",
        "--grid-r",
        "2",
        "--grid-beta",
        "1",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--min-count",
        "1",
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "r,beta,fold,f1");
    for (fold, line) in lines[1..4].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], "2");
        assert_eq!(cells[1], "1");
        assert_eq!(cells[2], fold.to_string());
        assert!(cells[3].parse::<f64>().is_ok());
    }
    assert_eq!(lines[4], "# selected r=2 beta=1");
}

#[test]
fn resuming_reproduces_the_straight_run_checkpoint() {
    let corpus = Corpus::new(120, 3);
    let straight = corpus.train_small("straight.ckpt", &[]);

    let resumed = corpus._dir.path().join("resumed.ckpt");
    let base = [
        "train",
        "--train",
        corpus.path_of(&corpus.train),
        "--valid",
        corpus.path_of(&corpus.valid),
        "--checkpoint",
        resumed.to_str().unwrap(),
        "--d",
        "4",
        "--L",
        "4",
        "--T",
        "12",
        "--batch-size",
        "16",
        "--min-count",
        "1",
    ];
    let mut one = base.to_vec();
    one.extend_from_slice(&["--epochs", "1"]);
    run_ok(&one);
    let mut two = base.to_vec();
    two.extend_from_slice(&["--epochs", "2", "--resume"]);
    run_ok(&two);

    assert_eq!(
        std::fs::read(&straight).unwrap(),
        std::fs::read(&resumed).unwrap()
    );
}
