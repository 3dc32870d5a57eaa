//! Command-line lab for the training regimes in `tfs-core`.
//!
//! Each phase of the protocol is independently invocable (`tapt`,
//! `finetune`, `selftrain`) for debugging, `run` executes a full experiment
//! matrix from a config file, and `report` re-renders tables from persisted
//! run records. Exit codes: 0 success, 1 config error, 2 data error,
//! 3 runtime/numeric error.
//!
//! Data files are JSONL; a `vocab.txt` is expected in the same directory as
//! a data file (both `gen-synthetic` and `run` lay datasets out that way).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tfs_core::data::{
    generate_synthetic_corpus, load_dataset, load_unlabeled, LabeledSet, SyntheticSpec,
    UnlabeledSet, Vocabulary,
};
use tfs_core::harness::{self, execute_experiment, load_records, parse_config, RUNS_FILE};
use tfs_core::model::{init_model, Model, ModelCheckpoint};
use tfs_core::protocols::{
    carve_dev, evaluate, run_finetune, run_self_training, run_tapt, RegimeConfig, DEV_FRACTION,
};
use tfs_core::seeding;
use tfs_core::{Result, TfsError};

#[derive(Parser)]
#[command(name = "tfs-lab", version, about = "Desk-scale semi-supervised training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classification corpus (train/dev/test + vocab).
    GenSynthetic {
        /// Spec JSON; an empty file means all defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue masked-language training on unlabeled text.
    Tapt {
        /// RegimeConfig JSON.
        #[arg(long)]
        config: PathBuf,
        /// One or more JSONL corpus files sharing one vocabulary.
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Checkpoint directory, or "random" for a fresh model.
        #[arg(long)]
        init: String,
        /// Directory the resulting checkpoint is written to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training of a task head on labeled data.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to start from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-student rounds over pseudo-labeled data.
    Selftrain {
        #[arg(long)]
        config: PathBuf,
        /// Fixed pseudo-label source checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Checkpoint the first student starts from.
        #[arg(long)]
        student_init: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        /// Round cap; overrides max_rounds from the config.
        #[arg(long)]
        rounds: usize,
    },
    /// Execute a full experiment matrix from an ExperimentConfig file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render report tables from a results directory's run records.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &TfsError) -> u8 {
    match err {
        TfsError::Config(_) => 1,
        TfsError::Data(_) | TfsError::Parse { .. } => 2,
        TfsError::Run { source, .. } => exit_code(source),
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let body = fs::read_to_string(path)?;
    let spec: SyntheticSpec = if body.trim().is_empty() {
        SyntheticSpec::default()
    } else {
        serde_json::from_str(&body)
            .map_err(|e| TfsError::Config(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses without validating: the vocabulary size may still be unfilled.
fn read_regime_config(path: &Path) -> Result<RegimeConfig> {
    let body = fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| TfsError::Config(format!("{}: {e}", path.display())))
}

/// The vocabulary is always read from `vocab.txt` beside the data file.
fn sibling_vocab(data_path: &Path) -> Result<Vocabulary> {
    let dir = data_path.parent().unwrap_or_else(|| Path::new("."));
    let path = dir.join("vocab.txt");
    if !path.is_file() {
        return Err(TfsError::Data(format!(
            "no vocab.txt beside {}; data files are read with the vocabulary in their directory",
            data_path.display()
        )));
    }
    Vocabulary::load(&path)
}

fn fill_vocab_size(config: &mut RegimeConfig, vocab_len: usize) -> Result<()> {
    if config.encoder.vocab_size == 0 {
        config.encoder.vocab_size = vocab_len;
    } else if config.encoder.vocab_size != vocab_len {
        return Err(TfsError::Config(format!(
            "configured vocab_size {} does not match the vocabulary's {} tokens",
            config.encoder.vocab_size, vocab_len
        )));
    }
    config.validate()
}

fn load_init(init: &str, config: &RegimeConfig) -> Result<ModelCheckpoint> {
    if init == "random" {
        init_model(&config.encoder, &[], seeding::derive(config.seed, &["init"]))
    } else {
        ModelCheckpoint::load(Path::new(init))
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic { spec, out } => {
            let spec = read_spec(&spec)?;
            let corpus = generate_synthetic_corpus(&spec)?;
            corpus.write_to(&out)?;
            println!(
                "wrote {} train / {} dev / {} test examples and a {}-token vocabulary to {}",
                spec.train_examples,
                spec.dev_examples,
                spec.test_examples,
                corpus.vocabulary.len(),
                out.display()
            );
            Ok(())
        }
        Command::Tapt { config, corpus, init, out } => {
            let mut config = read_regime_config(&config)?;
            let first = corpus
                .first()
                .ok_or_else(|| TfsError::Config("at least one corpus file is required".into()))?;
            let vocab = sibling_vocab(first)?;
            fill_vocab_size(&mut config, vocab.len())?;
            let mut examples = Vec::new();
            for path in &corpus {
                examples.extend(load_unlabeled(
                    path,
                    &config.task,
                    &vocab,
                    config.encoder.max_positions,
                )?);
            }
            let init = load_init(&init, &config)?;
            let (ckpt, log) = run_tapt(&init, &examples, &config)?;
            for (epoch, loss) in log.epoch_losses.iter().enumerate() {
                println!("epoch {}: mlm loss {loss:.4}", epoch + 1);
            }
            ckpt.save(&out)?;
            println!("saved checkpoint {} to {}", ckpt.id(), out.display());
            Ok(())
        }
        Command::Finetune { config, init, train, dev, out } => {
            let mut config = read_regime_config(&config)?;
            let vocab = sibling_vocab(&train)?;
            fill_vocab_size(&mut config, vocab.len())?;
            let max_len = config.encoder.max_positions;
            let train_set =
                LabeledSet { items: load_dataset(&train, &config.task, &vocab, max_len)? };
            let dev_set = LabeledSet { items: load_dataset(&dev, &config.task, &vocab, max_len)? };
            let init = ModelCheckpoint::load(&init)?;
            let (ckpt, log) = run_finetune(&init, &train_set, &config)?;
            for (epoch, loss) in log.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {loss:.4}", epoch + 1);
            }
            let metric = evaluate(
                &Model::from_checkpoint(&ckpt),
                &config.task,
                &dev_set,
                config.batch_size,
                "dev",
            )?;
            println!("dev {}: {:.4}", metric.metric.name(), metric.value);
            ckpt.save(&out)?;
            println!("saved checkpoint {} to {}", ckpt.id(), out.display());
            Ok(())
        }
        Command::Selftrain { config, teacher, student_init, unlabeled, labeled, rounds } => {
            let mut config = read_regime_config(&config)?;
            config.max_rounds = rounds;
            let vocab = sibling_vocab(&labeled)?;
            fill_vocab_size(&mut config, vocab.len())?;
            let max_len = config.encoder.max_positions;
            let labeled_all =
                LabeledSet { items: load_dataset(&labeled, &config.task, &vocab, max_len)? };
            let unlabeled_set = UnlabeledSet {
                items: load_unlabeled(&unlabeled, &config.task, &vocab, max_len)?,
            };
            let (train_set, dev_set) = carve_dev(
                &labeled_all,
                DEV_FRACTION,
                seeding::derive(config.seed, &["dev_carve"]),
            )?;
            let teacher = ModelCheckpoint::load(&teacher)?;
            let student_init = ModelCheckpoint::load(&student_init)?;
            let baseline = evaluate(
                &Model::from_checkpoint(&teacher),
                &config.task,
                &dev_set,
                config.batch_size,
                "dev",
            )?;
            println!(
                "teacher {}: dev {} {:.4}",
                teacher.id(),
                baseline.metric.name(),
                baseline.value
            );
            let (best, round_logs) = run_self_training(
                &teacher,
                &student_init,
                &train_set,
                &unlabeled_set,
                &dev_set,
                &config,
            )?;
            for log in &round_logs {
                let agreement = log
                    .pseudo_agreement
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "round {}: student {}, dev {:.4}, pseudo agreement {agreement}",
                    log.round, log.student_id, log.dev_metric
                );
            }
            println!("best checkpoint: {}", best.id());
            Ok(())
        }
        Command::Run { config } => {
            let config = parse_config(&config)?;
            let records = execute_experiment(&config)?;
            println!(
                "completed {} runs into {} ({} and report files written)",
                records.len(),
                config.output_dir.display(),
                RUNS_FILE
            );
            println!();
            let table = harness::build_table(&records)?;
            print!("{}", harness::report::render_text(&table));
            Ok(())
        }
        Command::Report { results, out } => {
            let records = load_records(&results)?;
            let table = harness::emit_report(&records, &out)?;
            println!("wrote report files for {} runs to {}", records.len(), out.display());
            println!();
            print!("{}", harness::report::render_text(&table));
            Ok(())
        }
    }
}
