//! End-to-end runs of the `cohort-mil` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cohort_mil::cli::{EXIT_IO, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cohort-mil"))
        .args(args)
        .current_dir(dir)
        .env("COHORT_MIL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8")
}

const FEATURES: &str = r#"instance={"kind":"features","d":6}"#;

fn synth(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", out, "--seed", "4", "--set", FEATURES];
    for e in extra {
        args.extend(["--set", e]);
    }
    let o = run(dir, &args);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
}

fn train(dir: &Path, data: &str, out: &str, folds: &str) -> Output {
    run(
        dir,
        &[
            "train", "--data", data, "--out-dir", out, "--folds", folds, "--epochs", "3", "--encoder-mode", "precomputed",
            "--aggregator", "abmil", "--seed", "9",
        ],
    )
}

#[test]
fn usage_and_io_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&run(dir.path(), &["synth", "--out", "d.jsonl", "--set", "no_such_key=1"])), EXIT_USAGE);
    assert_eq!(code(&run(dir.path(), &["train", "--data", "missing.jsonl", "--out-dir", "r"])), EXIT_IO);
    assert_eq!(code(&run(dir.path(), &["--help"])), EXIT_OK);
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a/data.jsonl", &[]);
    synth(dir.path(), "b/data.jsonl", &[]);
    for name in ["data.jsonl", "data.bin", "data.config.json"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn train_writes_one_directory_per_fold_and_eval_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data.jsonl", &[]);
    let o = train(dir.path(), "data.jsonl", "run", "5");
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("run");
    for i in 0..5 {
        assert!(run_dir.join(format!("fold_{i}/model_0.ckpt")).exists());
    }
    assert!(!run_dir.join("fold_5").exists());
    assert!(run_dir.join("aggregate.json").exists());
    assert!(run_dir.join("resolved_config.json").exists());
    assert!(!dir.path().join("run.partial").exists());

    let o = run(dir.path(), &["eval", "--model", "run/fold_2", "--data", "data.jsonl"]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let stored = fs::read_to_string(run_dir.join("fold_2/report.txt")).unwrap();
    let printed = stdout(&o);
    assert!(printed.contains(&stored), "eval output:\n{printed}\nstored:\n{stored}");

    let o = run(dir.path(), &["probe", "--model", "run", "--data", "data.jsonl"]);
    assert_eq!(code(&o), EXIT_OK);
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("probe_auc=")).count(), 5);

    let o = run(dir.path(), &["eval", "--model", ".", "--data", "data.jsonl"]);
    assert_eq!(code(&o), EXIT_MISMATCH);
}

#[test]
fn probe_on_a_single_cohort_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "one.jsonl", &["cohorts=1", "patients_per_cohort=[20]"]);
    assert_eq!(code(&train(dir.path(), "one.jsonl", "run", "2")), EXIT_OK);
    let o = run(dir.path(), &["probe", "--model", "run", "--data", "one.jsonl"]);
    assert_eq!(code(&o), EXIT_USAGE);
}

#[test]
fn verify_lists_each_selected_suite_once() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--only", "metrics", "--only", "balancing", "--only", "split"]);
    assert_eq!(code(&o), EXIT_OK, "{}", stdout(&o));
    let text = stdout(&o);
    for name in ["metrics.auc", "balancing.weights", "split.leakage"] {
        let lines = text.lines().filter(|l| l.starts_with(&format!("suite={name} "))).count();
        assert_eq!(lines, 1, "{name} in\n{text}");
    }
    assert!(text.contains("suites=3 failed=0"), "{text}");
}

#[test]
fn every_registered_suite_has_a_unique_name() {
    let names: Vec<&str> = cohort_mil::verify::suites().iter().map(|s| s.name).collect();
    let unique: std::collections::BTreeSet<&str> = names.iter().copied().collect();
    assert_eq!(unique.len(), names.len());
}
