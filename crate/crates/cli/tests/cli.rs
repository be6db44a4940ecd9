//! Black-box tests of the binary: exit codes, atomicity, config layering,
//! and the thin-delegation subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densesteer_core::model::{init_micro_model, Backend, ModelConfig};
use densesteer_core::prompts;

const BIN: &str = env!("CARGO_BIN_EXE_densesteer");

fn run(args: &[&str], envs: &[(&str, &str)], dir: &Path) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).current_dir(dir).env("RUST_LOG", "error");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn densesteer")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_traces(dir: &Path) -> PathBuf {
    let path = dir.join("traces.jsonl");
    let lines = [
        serde_json::json!({
            "question_id": "a", "question": "q1",
            "solution": "step one\n\nstep two has more text\n\nFinal Answer: \\boxed{4}",
            "sample_index": 0
        }),
        serde_json::json!({
            "question_id": "b", "question": "q2",
            "solution": "only one step",
            "sample_index": 0
        }),
    ];
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn unknown_flag_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "density",
            "--traces",
            "t.jsonl",
            "--out",
            "d.csv",
            "--bogus-flag",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d.csv").exists());
}

#[test]
fn missing_required_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["density"], &[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn domain_error_exits_1_without_declared_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "this is not json\n").unwrap();
    let out = run(
        &[
            "density",
            "--traces",
            bad.to_str().unwrap(),
            "--out",
            "d.csv",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("d.csv").exists());
}

#[test]
fn density_emits_per_record_rows() {
    let dir = tempfile::tempdir().unwrap();
    let traces = write_traces(dir.path());
    let out = run(
        &[
            "density",
            "--traces",
            traces.to_str().unwrap(),
            "--out",
            "d.csv",
        ],
        &[],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let text = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "question_id,n_steps,n_tokens,rho");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "a");
    assert_eq!(row[1], "3");
    let row2: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row2[1], "1");
    assert_eq!(row2[2], "13");
    assert_eq!(row2[3], "13");
    // Manifest written alongside.
    assert!(dir.path().join("d.csv.manifest.json").exists());
}

#[test]
fn das_prints_the_score() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["das", "--rho", "40", "--nll", "2.5"], &[], dir.path());
    assert!(out.status.success());
    let value: f64 = stdout(&out).trim().parse().unwrap();
    assert!((value - (40f64.ln() - 2.5)).abs() < 1e-12);
}

#[test]
fn das_rejects_nonpositive_rho_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["das", "--rho", "0", "--nll", "1"], &[], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn avg_weighted_mean_and_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "avg",
            "--accuracies",
            "84.8,64.6,42.5,20.7,10.0",
            "--sizes",
            "1319,500,40,675,30",
        ],
        &[],
        dir.path(),
    );
    assert!(out.status.success());
    let value: f64 = stdout(&out).trim().parse().unwrap();
    assert!((value - 62.5).abs() < 0.1);

    let out = run(
        &["avg", "--accuracies", "1.0,2.0", "--sizes", "3"],
        &[],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn version_names_format_versions() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--version"], &[], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("weights-format v1"), "{text}");
    assert!(text.contains("vector-format v1"));
    assert!(text.contains("report-schema v1"));
}

#[test]
fn config_precedence_flags_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig {
        max_seq_len: 512,
        ..ModelConfig::default()
    };
    let model = init_micro_model(&config).unwrap();
    densesteer_core::model::save_weights(&model, &dir.path().join("model.bin")).unwrap();

    let dataset = dir.path().join("one.jsonl");
    fs::write(
        &dataset,
        serde_json::to_string(&serde_json::json!({
            "question_id": "q0", "question": "What is 2+2?", "answer": "#### 4"
        }))
        .unwrap()
            + "\n",
    )
    .unwrap();
    fs::write(dir.path().join("ds.toml"), "max_new_tokens = 4\n").unwrap();

    let expected = |budget: usize| {
        let ids = model
            .tokenizer()
            .tokenize(&prompts::cot_prompt("What is 2+2?"));
        let generated = model.greedy_generate(&ids, budget, None).unwrap();
        model.tokenizer().detokenize(&generated)
    };
    let generated_solution = |name: &str| {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        v["solution"].as_str().unwrap().to_string()
    };

    // Config file only: budget 4.
    let out = run(
        &[
            "--config",
            "ds.toml",
            "generate",
            "--model",
            "model.bin",
            "--dataset",
            "one.jsonl",
            "--out",
            "g1.jsonl",
        ],
        &[],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    assert_eq!(generated_solution("g1.jsonl"), expected(4));

    // Environment beats the file: budget 6.
    let out = run(
        &[
            "--config",
            "ds.toml",
            "generate",
            "--model",
            "model.bin",
            "--dataset",
            "one.jsonl",
            "--out",
            "g2.jsonl",
        ],
        &[("DENSESTEER_MAX_NEW_TOKENS", "6")],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(generated_solution("g2.jsonl"), expected(6));

    // Flag beats both: budget 8.
    let out = run(
        &[
            "--config",
            "ds.toml",
            "generate",
            "--model",
            "model.bin",
            "--dataset",
            "one.jsonl",
            "--max-new-tokens",
            "8",
            "--out",
            "g3.jsonl",
        ],
        &[("DENSESTEER_MAX_NEW_TOKENS", "6")],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(generated_solution("g3.jsonl"), expected(8));
}

#[test]
fn unknown_backend_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "--backend",
            "gguf",
            "density",
            "--traces",
            "t.jsonl",
            "--out",
            "d.csv",
        ],
        &[],
        dir.path(),
    );
    // density does not load a backend; use a model-loading command instead.
    drop(out);
    let out = run(
        &[
            "--backend",
            "gguf",
            "generate",
            "--model",
            "missing.bin",
            "--dataset",
            "x.jsonl",
            "--out",
            "g.jsonl",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
