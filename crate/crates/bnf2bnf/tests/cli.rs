//! End-to-end tests of the command-line binary: exit codes, determinism of
//! corpus generation, checkpointing behaviour, and the infer/eval round trip.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bnf2bnf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn bnf2bnf")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Reads every file in a directory into (name, bytes), sorted by name.
fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            (name, std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

fn gen_corpus(dir: &Path, seed: u64) {
    let out = run(&[
        "gen-data",
        "--preset=toy",
        &format!("--corpus_dir={}", dir.display()),
        "--size=40",
        &format!("--seed={seed}"),
    ]);
    assert!(out.status.success(), "gen-data failed: {}", stderr_of(&out));
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("usage"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("unknown command"));
}

#[test]
fn malformed_flag_is_a_usage_error() {
    let out = run(&["train", "--max_steps"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["infer", "--input=whatever.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--checkpoint"));
}

#[test]
fn unknown_config_key_is_a_runtime_error() {
    let out = run(&["gen-data", "--preset=toy", "--batchsize=4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("batchsize"));
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let out = run(&["gen-data", "--config=/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let c = root.path().join("c");
    gen_corpus(&a, 11);
    gen_corpus(&b, 11);
    gen_corpus(&c, 12);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn seed_env_variable_matches_explicit_flag() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    gen_corpus(&a, 23);
    let out = bin()
        .args([
            "gen-data",
            "--preset=toy",
            &format!("--corpus_dir={}", b.display()),
            "--size=40",
        ])
        .env("BNF2BNF_SEED", "23")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn zero_step_training_writes_only_the_initial_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    let run_dir = root.path().join("run");
    gen_corpus(&corpus, 5);
    let out = run(&[
        "train",
        "--preset=toy",
        &format!("--corpus_dir={}", corpus.display()),
        &format!("--run_dir={}", run_dir.display()),
        "--max_steps=0",
        "--phase_boundary_step=0",
        "--seed=5",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(run_dir.join("ckpt_000000.ckpt").is_file());
    let checkpoints: Vec<_> = std::fs::read_dir(&run_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".ckpt")
        })
        .collect();
    assert_eq!(checkpoints.len(), 1);
}

#[test]
fn train_infer_eval_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    let run_dir = root.path().join("run");
    gen_corpus(&corpus, 9);
    let out = run(&[
        "train",
        "--preset=toy",
        &format!("--corpus_dir={}", corpus.display()),
        &format!("--run_dir={}", run_dir.display()),
        "--max_steps=12",
        "--phase_boundary_step=8",
        "--checkpoint_interval=6",
        "--batch_size=4",
        "--seed=9",
    ]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let ckpt = run_dir.join("ckpt_000012.ckpt");
    assert!(ckpt.is_file());
    assert!(run_dir.join("metrics.tsv").is_file());

    let output = root.path().join("inferred.bin");
    let out = run(&[
        "infer",
        "--preset=toy",
        &format!("--corpus_dir={}", corpus.display()),
        &format!("--checkpoint={}", ckpt.display()),
        &format!("--input={}", corpus.join("utt_00000.bin").display()),
        &format!("--output={}", output.display()),
        "--seed=9",
    ]);
    assert!(out.status.success(), "infer failed: {}", stderr_of(&out));
    assert!(output.is_file());
    assert!(root.path().join("inferred.alignment.txt").is_file());

    let out = run(&[
        "eval",
        "--preset=toy",
        &format!("--corpus_dir={}", corpus.display()),
        &format!("--run_dir={}", run_dir.display()),
        &format!("--checkpoint={}", ckpt.display()),
        "--seed=9",
    ]);
    assert!(out.status.success(), "eval failed: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["corpus_bleu"].is_number());
    assert!(report["utterances"].as_u64().unwrap() > 0);
}

#[test]
fn eval_rejects_a_checkpoint_from_a_different_corpus() {
    let root = tempfile::tempdir().unwrap();
    let corpus_a = root.path().join("a");
    let corpus_b = root.path().join("b");
    let run_dir = root.path().join("run");
    gen_corpus(&corpus_a, 31);
    gen_corpus(&corpus_b, 32);
    let out = run(&[
        "train",
        "--preset=toy",
        &format!("--corpus_dir={}", corpus_a.display()),
        &format!("--run_dir={}", run_dir.display()),
        "--max_steps=0",
        "--phase_boundary_step=0",
        "--seed=31",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let ckpt = run_dir.join("ckpt_000000.ckpt");
    let eval_args = |force: bool| {
        let mut v = vec![
            "eval".to_string(),
            "--preset=toy".to_string(),
            format!("--corpus_dir={}", corpus_b.display()),
            format!("--run_dir={}", run_dir.display()),
            format!("--checkpoint={}", ckpt.display()),
            "--seed=31".to_string(),
        ];
        if force {
            v.push("--force=true".to_string());
        }
        v
    };
    let out = bin().args(eval_args(false)).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("different corpus"));
    let out = bin().args(eval_args(true)).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
}
