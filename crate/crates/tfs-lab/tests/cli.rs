//! End-to-end tests of the CLI surface: every subcommand, the exit-code
//! contract, and determinism of checkpoint ids across reruns.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfs-lab"))
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

const SPEC: &str = r#"{"vocab_size": 24, "classes": 2, "min_len": 3, "max_len": 6,
    "train_examples": 48, "dev_examples": 12, "test_examples": 12,
    "noise_rate": 0.0, "seed": 7}"#;

const REGIME: &str = r#"{
    "task": {"family": "single_sentence_classification", "classes": 2, "metric": "accuracy"},
    "encoder": {"vocab_size": 0, "hidden_size": 16, "num_layers": 1, "num_heads": 2,
                "ff_size": 32, "max_positions": 8, "dropout": 0.0},
    "tapt_epochs": 1, "finetune_epochs": 2, "st_epochs_per_round": 1, "max_rounds": 1,
    "batch_size": 8, "mlm_batch_size": 8, "pseudo_batch_size": 8, "seed": 11}"#;

fn write_corpus(dir: &Path) {
    let spec = dir.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let output = bin()
        .args(["gen-synthetic", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.join("data"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
}

fn saved_checkpoint_id(text: &str) -> String {
    let line = text
        .lines()
        .find(|l| l.starts_with("saved checkpoint "))
        .unwrap_or_else(|| panic!("no checkpoint line in {text:?}"));
    line.split_whitespace().nth(2).unwrap().to_string()
}

#[test]
fn gen_synthetic_writes_corpus_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    for file in ["train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt"] {
        assert!(dir.path().join("data").join(file).is_file(), "{file} missing");
    }
}

#[test]
fn phase_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let regime = dir.path().join("regime.json");
    fs::write(&regime, REGIME).unwrap();
    let data = dir.path().join("data");

    let mut tapt_ids = Vec::new();
    for name in ["tapt-a", "tapt-b"] {
        let output = bin()
            .args(["tapt", "--config"])
            .arg(&regime)
            .arg("--corpus")
            .arg(data.join("train.jsonl"))
            .arg("--init")
            .arg("random")
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", stderr(&output));
        let text = stdout(&output);
        assert!(text.contains("mlm loss"), "{text}");
        tapt_ids.push(saved_checkpoint_id(&text));
    }
    assert_eq!(tapt_ids[0], tapt_ids[1], "identical invocations must agree");
    assert!(dir.path().join("tapt-a/manifest.json").is_file());

    let output = bin()
        .args(["finetune", "--config"])
        .arg(&regime)
        .arg("--init")
        .arg(dir.path().join("tapt-a"))
        .arg("--train")
        .arg(data.join("train.jsonl"))
        .arg("--dev")
        .arg(data.join("dev.jsonl"))
        .arg("--out")
        .arg(dir.path().join("ft"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("dev accuracy:"), "{text}");

    let output = bin()
        .args(["selftrain", "--config"])
        .arg(&regime)
        .arg("--teacher")
        .arg(dir.path().join("ft"))
        .arg("--student-init")
        .arg(dir.path().join("tapt-a"))
        .arg("--unlabeled")
        .arg(data.join("train.jsonl"))
        .arg("--labeled")
        .arg(data.join("train.jsonl"))
        .args(["--rounds", "1"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("teacher "), "{text}");
    assert!(text.contains("round 1: student "), "{text}");
    assert!(text.contains("best checkpoint: "), "{text}");
}

#[test]
fn run_resumes_and_report_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = dir.path().join("experiment.json");
    fs::write(
        &config,
        format!(
            r#"{{"data": {{"synthetic": {SPEC}}},
            "labeled_ratios": [0.25], "n_splits": 1, "n_seeds_per_split": 1,
            "regimes": ["ft", "tfs"], "master_seed": 3,
            "output_dir": {:?},
            "regime_config": {{"encoder": {{"vocab_size": 0, "hidden_size": 16,
                "num_layers": 1, "num_heads": 2, "ff_size": 32, "max_positions": 8,
                "dropout": 0.0}},
              "tapt_epochs": 1, "finetune_epochs": 1, "st_epochs_per_round": 1,
              "max_rounds": 1, "batch_size": 8, "mlm_batch_size": 8,
              "pseudo_batch_size": 8}}}}"#,
            out.to_str().unwrap()
        ),
    )
    .unwrap();

    let output = bin().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("completed 2 runs"), "{text}");
    assert!(text.contains("labeled ratio 25%"), "{text}");
    assert!(out.join("runs.jsonl").is_file());
    assert!(out.join("report.tsv").is_file());
    assert!(out.join("report.txt").is_file());

    // Rerunning resumes from the completed records.
    let rerun = bin().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(rerun.status.success(), "{}", stderr(&rerun));
    assert_eq!(stdout(&rerun), text, "a resumed rerun reports identically");

    let report_out = dir.path().join("rendered");
    let output = bin()
        .args(["report", "--results"])
        .arg(&out)
        .arg("--out")
        .arg(&report_out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("TFS"), "{}", stdout(&output));
    assert!(report_out.join("report.txt").is_file());
}

#[test]
fn exit_codes_follow_the_error_families() {
    let dir = tempfile::tempdir().unwrap();

    // 1: config errors, including unknown keys and bad ranges.
    let bad_key = dir.path().join("bad-key.json");
    fs::write(&bad_key, r#"{"leanring_rate": 0.1}"#).unwrap();
    let output = bin().args(["run", "--config"]).arg(&bad_key).output().unwrap();
    assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));
    assert!(stderr(&output).contains("leanring_rate"), "{}", stderr(&output));

    let bad_ratio = dir.path().join("bad-ratio.json");
    fs::write(&bad_ratio, r#"{"labeled_ratios": [1.5]}"#).unwrap();
    let output = bin().args(["run", "--config"]).arg(&bad_ratio).output().unwrap();
    assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));

    // 1: malformed flags are config errors too.
    let output = bin().args(["run", "--nope"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));

    // 0: help.
    let output = bin().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(stdout(&output).contains("gen-synthetic"));

    // 2: data errors (a dataset without its vocabulary).
    write_corpus(dir.path());
    let regime = dir.path().join("regime.json");
    fs::write(&regime, REGIME).unwrap();
    let lonely = dir.path().join("lonely");
    fs::create_dir_all(&lonely).unwrap();
    fs::copy(dir.path().join("data/train.jsonl"), lonely.join("train.jsonl")).unwrap();
    let output = bin()
        .args(["tapt", "--config"])
        .arg(&regime)
        .arg("--corpus")
        .arg(lonely.join("train.jsonl"))
        .args(["--init", "random"])
        .arg("--out")
        .arg(dir.path().join("ck"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(stderr(&output).contains("vocab.txt"), "{}", stderr(&output));

    // 2: malformed data records carry their line number.
    let broken = dir.path().join("data/broken.jsonl");
    fs::write(&broken, "{\"text\": \"ok\", \"label\": 0}\n{\"text\": 5}\n").unwrap();
    let output = bin()
        .args(["finetune", "--config"])
        .arg(&regime)
        .arg("--init")
        .arg(dir.path().join("missing-ckpt"))
        .arg("--train")
        .arg(&broken)
        .arg("--dev")
        .arg(&broken)
        .arg("--out")
        .arg(dir.path().join("ck2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(stderr(&output).contains("line 2"), "{}", stderr(&output));

    // 3: runtime errors (loading a checkpoint that is not there).
    let ok_data = dir.path().join("data");
    let output = bin()
        .args(["finetune", "--config"])
        .arg(&regime)
        .arg("--init")
        .arg(dir.path().join("missing-ckpt"))
        .arg("--train")
        .arg(ok_data.join("train.jsonl"))
        .arg("--dev")
        .arg(ok_data.join("dev.jsonl"))
        .arg("--out")
        .arg(dir.path().join("ck3"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", stderr(&output));
}
