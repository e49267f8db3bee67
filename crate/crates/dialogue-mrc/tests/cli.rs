//! End-to-end checks of the installed binary: the gen-synth -> train ->
//! eval -> predict -> inspect pipeline, plus exit-code conventions.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dialogue-mrc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout: {}\nstderr: {}",
        stdout_of(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_TRAIN: &[&str] = &[
    "--set", "hidden=8",
    "--set", "heads=2",
    "--set", "layers=1",
    "--set", "ffn=16",
    "--set", "max_len=64",
    "--set", "batch_size=4",
    "--set", "max_steps=8",
    "--set", "dropout=0.0",
];

fn gen_corpus(dir: &Path) -> String {
    let corpus = dir.join("synth.json").to_string_lossy().into_owned();
    let out = run(&["gen-synth", "--out", &corpus, "--dialogues", "8", "--seed", "3"]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("wrote 8 dialogues"));
    corpus
}

#[test]
fn help_and_version_exit_zero_missing_args_exit_one() {
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
    assert!(stdout_of(&run(&["--version"])).contains("dialogue-mrc"));

    let out = bin().output().expect("binary runs");
    assert_code(&out, 1);
    let out = run(&["train", "--corpus"]); // missing value
    assert_code(&out, 1);
}

#[test]
fn pipeline_from_synth_corpus_to_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());
    let run_dir = dir.path().join("run").to_string_lossy().into_owned();

    let mut args = vec!["train", "--corpus", &corpus, "--out", &run_dir];
    args.extend_from_slice(TINY_TRAIN);
    let out = run(&args);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("trained 8 steps"));
    assert!(stdout_of(&out).contains("checkpoint written to"));

    for file in ["model.ckpt", "config.txt", "loss.csv"] {
        assert!(dir.path().join("run").join(file).exists(), "missing {file}");
    }
    let csv = std::fs::read_to_string(dir.path().join("run").join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9); // header + one row per step
    assert!(csv.starts_with("step,loss"));

    let ckpt = dir.path().join("run/model.ckpt").to_string_lossy().into_owned();
    let preds = dir.path().join("preds.json").to_string_lossy().into_owned();
    let out = run(&["eval", "--checkpoint", &ckpt, "--corpus", &corpus, "--out", &preds]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("EM"));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
    // 8 synth dialogues carry 10 questions (plain ones have two).
    assert_eq!(parsed.as_object().unwrap().len(), 10);
    assert!(parsed.get("synth-pair0a-q0").is_some());

    let preds2 = dir.path().join("preds2.json").to_string_lossy().into_owned();
    let out = run(&["predict", "--checkpoint", &ckpt, "--corpus", &corpus, "--out", &preds2]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("10 predictions written to"));
}

#[test]
fn inspect_commands_render_graphs_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());

    let out = run(&[
        "inspect-graph", "--corpus", &corpus, "--dialogue", "synth-pair0a", "--kind", "speaker",
    ]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("NODE 0 UTTERANCE"));
    assert!(text.contains("GLOBAL"));
    assert!(text.contains("same_speaker"));

    let out = run(&[
        "inspect-graph", "--corpus", &corpus, "--dialogue", "synth-pair0a", "--kind", "discourse",
    ]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("RELATION"));

    let out = run(&[
        "inspect-masks",
        "--corpus", &corpus,
        "--dialogue", "synth-pair0a",
        "--question", "synth-pair0a-q0",
    ]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("same-speaker channel:"));
    assert!(text.contains("different-speaker channel:"));
    assert!(text.contains('#') && text.contains('.'));
}

#[test]
fn grad_check_command_reports_ok() {
    let out = run(&["grad-check", "--module", "span"]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("module span: max relative error"));
    assert!(text.lines().last().unwrap().trim() == "ok");
}

#[test]
fn data_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());
    let missing = dir.path().join("nope.ckpt").to_string_lossy().into_owned();
    let preds = dir.path().join("p.json").to_string_lossy().into_owned();
    let out = run(&["eval", "--checkpoint", &missing, "--corpus", &corpus, "--out", &preds]);
    assert_code(&out, 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ this is not json").unwrap();
    let bad = bad.to_string_lossy().into_owned();
    let out_dir = dir.path().join("x").to_string_lossy().into_owned();
    let mut args = vec!["train", "--corpus", &bad, "--out", &out_dir];
    args.extend_from_slice(TINY_TRAIN);
    assert_code(&run(&args), 2);

    let out = run(&[
        "train", "--corpus", &corpus, "--out", &out_dir, "--set", "learning_rat=1e-3",
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn numeric_blowup_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());
    let out_dir = dir.path().join("run").to_string_lossy().into_owned();
    let mut args = vec!["train", "--corpus", &corpus, "--out", &out_dir];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(&["--set", "learning_rate=1e200"]);
    let out = run(&args);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
