//! Experiment driver: expand a config into a ratio x split x seed x regime
//! run matrix, execute it, persist per-run records, and aggregate reports.
//!
//! Seed plan, everything derived from `master_seed`:
//!
//! - split sampling: `derive(master, ["split_<si>"])`, one stream per split
//!   index and reused across ratios, so the labeled subsets of one split
//!   nest as the ratio grows.
//! - shared adaptation: `derive(master, ["split_<si>", "tapt"])`. The
//!   adaptation corpus is the full training text (ratio-independent), so a
//!   single checkpoint per split serves every ratio and every regime.
//! - runs: `derive(master, ["ratio_<ri>", "split_<si>", "seed_<ki>",
//!   regime_key])` - regimes on the same split share data but never
//!   training randomness.
//!
//! Resume: a run directory whose `record.json` parses is complete and is
//! skipped; anything else is recomputed from scratch. The resolved config
//! is echoed into the output directory on first use and later invocations
//! must match it byte for byte, so one directory never mixes experiments.

pub mod report;

pub use report::{build_table, emit_report, load_records, ReportBlock, ReportRow, ReportTable};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_corpus, load_dataset, sample_split, Example, Label, LabeledSet,
    SyntheticSpec, TaskKind, UnlabeledSet, Vocabulary,
};
use crate::error::{Result, TfsError};
use crate::model::{init_model, EncoderConfig, ModelCheckpoint};
use crate::protocols::{
    run_regime, run_tapt, PhaseLog, Regime, RegimeConfig, RegimeData, RoundLog,
};
use crate::seeding;
use crate::tensor::AdamConfig;

/// Resolved-config echo, written once per output directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
/// One completed `RunRecord` per line, in plan order.
pub const RUNS_FILE: &str = "runs.jsonl";
/// Per-run completion marker and payload inside each run directory.
pub const RECORD_FILE: &str = "record.json";

/// On-disk dataset: JSON Lines splits plus the vocabulary that reads them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    pub vocab: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Tokenization cap; defaults to the encoder's position budget.
    pub max_len: Option<usize>,
}

/// Where the experiment's data comes from. Labeled/unlabeled pools are
/// always carved out of the training split by ratio, so no separate
/// unlabeled file exists: the unlabeled pool is the unpicked remainder with
/// labels stripped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(DataFiles),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Partial overlay on `RegimeConfig`: only the set fields change. The
/// task and seed are never patched; the driver owns both.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimePatch {
    pub encoder: Option<EncoderConfig>,
    pub optimizer: Option<AdamConfig>,
    pub tapt_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub st_epochs_per_round: Option<usize>,
    pub max_rounds: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub mlm_batch_size: Option<usize>,
    pub pseudo_batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub mask_prob: Option<f64>,
}

impl RegimePatch {
    pub fn apply(&self, config: &mut RegimeConfig) {
        if let Some(v) = self.encoder {
            config.encoder = v;
        }
        if let Some(v) = self.optimizer {
            config.optimizer = v;
        }
        if let Some(v) = self.tapt_epochs {
            config.tapt_epochs = v;
        }
        if let Some(v) = self.finetune_epochs {
            config.finetune_epochs = v;
        }
        if let Some(v) = self.st_epochs_per_round {
            config.st_epochs_per_round = v;
        }
        if let Some(v) = self.max_rounds {
            config.max_rounds = v;
        }
        if let Some(v) = self.patience {
            config.patience = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.mlm_batch_size {
            config.mlm_batch_size = v;
        }
        if let Some(v) = self.pseudo_batch_size {
            config.pseudo_batch_size = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.mask_prob {
            config.mask_prob = v;
        }
    }
}

/// Full experiment description. Every field has a default, so `{}` is a
/// valid config; unknown keys are rejected by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Task posed by the data. Derived automatically for synthetic data
    /// (and checked for consistency if also given); required for files.
    pub task: Option<TaskKind>,
    pub labeled_ratios: Vec<f64>,
    pub n_splits: usize,
    pub n_seeds_per_split: usize,
    pub regimes: Vec<Regime>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Baseline knob overrides applied to every regime.
    pub regime_config: RegimePatch,
    /// Per-regime overrides applied on top of `regime_config`.
    pub regime_overrides: BTreeMap<Regime, RegimePatch>,
    /// Adapt once per split on the full training text and share the
    /// checkpoint across ratios and regimes (the default); when false every
    /// run adapts on its own labeled+unlabeled corpus. Shared adaptation is
    /// built from the baseline knobs, so per-regime overrides of the
    /// adaptation knobs only take effect when this is false.
    pub share_tapt: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            task: None,
            labeled_ratios: vec![0.01],
            n_splits: 3,
            n_seeds_per_split: 3,
            regimes: Regime::ALL.to_vec(),
            master_seed: 0,
            output_dir: PathBuf::from("tfs-out"),
            regime_config: RegimePatch::default(),
            regime_overrides: BTreeMap::new(),
            share_tapt: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_ratios.is_empty() {
            return Err(TfsError::Config("labeled_ratios must not be empty".into()));
        }
        for &ratio in &self.labeled_ratios {
            if !ratio.is_finite() || !(ratio > 0.0 && ratio < 1.0) {
                return Err(TfsError::Config(format!(
                    "labeled ratio must lie strictly between 0 and 1, got {ratio}"
                )));
            }
        }
        if self.n_splits == 0 {
            return Err(TfsError::Config("n_splits must be at least 1".into()));
        }
        if self.n_seeds_per_split == 0 {
            return Err(TfsError::Config("n_seeds_per_split must be at least 1".into()));
        }
        if self.regimes.is_empty() {
            return Err(TfsError::Config("regimes must not be empty".into()));
        }
        for (i, regime) in self.regimes.iter().enumerate() {
            if self.regimes[..i].contains(regime) {
                return Err(TfsError::Config(format!(
                    "regime {regime} appears more than once"
                )));
            }
        }
        if let Some(task) = &self.task {
            task.validate()?;
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                if let Some(task) = &self.task {
                    if *task != spec.task() {
                        return Err(TfsError::Config(
                            "configured task does not match the synthetic data".into(),
                        ));
                    }
                }
            }
            DataSource::Files(_) => {
                if self.task.is_none() {
                    return Err(TfsError::Config(
                        "task is required for file-based data".into(),
                    ));
                }
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(TfsError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Baseline config plus the per-regime override (when `regime` is
    /// given), with the vocabulary size filled in and everything validated.
    fn resolve_regime(
        &self,
        regime: Option<Regime>,
        task: &TaskKind,
        vocab_len: usize,
    ) -> Result<RegimeConfig> {
        let mut config = RegimeConfig::new(*task);
        self.regime_config.apply(&mut config);
        if let Some(regime) = regime {
            if let Some(patch) = self.regime_overrides.get(&regime) {
                patch.apply(&mut config);
            }
        }
        if config.encoder.vocab_size == 0 {
            config.encoder.vocab_size = vocab_len;
        } else if config.encoder.vocab_size != vocab_len {
            return Err(TfsError::Config(format!(
                "configured vocab_size {} does not match the vocabulary's {} tokens",
                config.encoder.vocab_size, vocab_len
            )));
        }
        config.validate()?;
        Ok(config)
    }
}

/// Reads and validates an experiment config file. An empty file means all
/// defaults; unknown keys and bad ranges are config errors naming the
/// offender.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let body = fs::read_to_string(path)?;
    let config: ExperimentConfig = if body.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        serde_json::from_str(&body)
            .map_err(|e| TfsError::Config(format!("{}: {e}", path.display())))?
    };
    config.validate()?;
    Ok(config)
}

/// Everything recorded about one completed run. `record.json` inside the
/// run directory holds exactly this; `runs.jsonl` repeats it one per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub ratio: f64,
    pub ratio_index: usize,
    pub split_index: usize,
    pub seed_index: usize,
    pub regime: Regime,
    pub run_seed: u64,
    pub metric: String,
    pub dev_value: f64,
    pub test_value: Option<f64>,
    pub checkpoint_id: String,
    pub phases: Vec<PhaseLog>,
    pub rounds: Vec<RoundLog>,
}

#[derive(Debug, Clone)]
struct PlannedRun {
    ratio: f64,
    ratio_index: usize,
    split_index: usize,
    seed_index: usize,
    regime: Regime,
    run_seed: u64,
    dir: PathBuf,
}

struct RunContext {
    configs: BTreeMap<Regime, RegimeConfig>,
    splits: BTreeMap<(usize, usize), (LabeledSet, UnlabeledSet)>,
    shared_tapt: BTreeMap<usize, ModelCheckpoint>,
    dev: Option<LabeledSet>,
    test: Option<LabeledSet>,
    metric: String,
}

struct LoadedData {
    task: TaskKind,
    vocab_len: usize,
    full_train: Vec<(Example, Label)>,
    dev: Option<LabeledSet>,
    test: Option<LabeledSet>,
}

fn load_data(config: &ExperimentConfig, out: &Path) -> Result<LoadedData> {
    match &config.data {
        DataSource::Synthetic(spec) => {
            let corpus = generate_synthetic_corpus(spec)?;
            corpus.write_to(&out.join("data"))?;
            Ok(LoadedData {
                task: corpus.task(),
                vocab_len: corpus.vocabulary.len(),
                full_train: corpus.labeled_items("train")?,
                dev: Some(LabeledSet { items: corpus.labeled_items("dev")? }),
                test: Some(LabeledSet { items: corpus.labeled_items("test")? }),
            })
        }
        DataSource::Files(files) => {
            let task = config
                .task
                .ok_or_else(|| TfsError::Config("task is required for file-based data".into()))?;
            let vocab = Vocabulary::load(&files.vocab)?;
            let mut probe = RegimeConfig::new(task);
            config.regime_config.apply(&mut probe);
            let max_len = files.max_len.unwrap_or(probe.encoder.max_positions);
            let load = |path: &PathBuf| load_dataset(path, &task, &vocab, max_len);
            let dev = files.dev.as_ref().map(&load).transpose()?;
            let test = files.test.as_ref().map(&load).transpose()?;
            Ok(LoadedData {
                task,
                vocab_len: vocab.len(),
                full_train: load(&files.train)?,
                dev: dev.map(|items| LabeledSet { items }),
                test: test.map(|items| LabeledSet { items }),
            })
        }
    }
}

/// Writes the resolved config into the output directory, or checks it
/// against the echo already there so one directory never mixes experiments.
fn echo_resolved_config(config: &ExperimentConfig) -> Result<()> {
    let path = config.output_dir.join(RESOLVED_CONFIG_FILE);
    let body = serde_json::to_string_pretty(config)?;
    if path.exists() {
        if fs::read_to_string(&path)? != body {
            return Err(TfsError::Config(format!(
                "{} holds results for a different configuration; use a fresh output directory",
                config.output_dir.display()
            )));
        }
        return Ok(());
    }
    fs::write(&path, body)?;
    Ok(())
}

/// Adaptation checkpoint for one split: loaded from disk when a compatible
/// one is already there, computed and persisted otherwise.
fn shared_adaptation(
    out: &Path,
    base: &RegimeConfig,
    corpus: &[Example],
    master_seed: u64,
    split_index: usize,
) -> Result<ModelCheckpoint> {
    let dir = out.join("tapt").join(format!("split_{split_index}"));
    let ckpt_dir = dir.join("checkpoint");
    if ckpt_dir.is_dir() {
        if let Ok(ckpt) = ModelCheckpoint::load(&ckpt_dir) {
            if ckpt.config.same_architecture(&base.encoder) {
                return Ok(ckpt);
            }
        }
    }
    let mut config = base.clone();
    config.seed = seeding::derive(master_seed, &[&format!("split_{split_index}"), "tapt"]);
    let init = init_model(&config.encoder, &[], seeding::derive(config.seed, &["init"]))?;
    let (ckpt, log) = run_tapt(&init, corpus, &config)?;
    fs::create_dir_all(&dir)?;
    ckpt.save(&ckpt_dir)?;
    fs::write(dir.join("phase.json"), serde_json::to_string_pretty(&log)?)?;
    Ok(ckpt)
}

fn execute_one(run: &PlannedRun, ctx: &RunContext) -> Result<RunRecord> {
    let record_path = run.dir.join(RECORD_FILE);
    if let Ok(body) = fs::read_to_string(&record_path) {
        // A parseable record marks a completed run; a torn write from an
        // interrupted session falls through and is recomputed.
        if let Ok(record) = serde_json::from_str::<RunRecord>(&body) {
            return Ok(record);
        }
    }
    fs::create_dir_all(&run.dir)?;
    let (labeled, unlabeled) = &ctx.splits[&(run.ratio_index, run.split_index)];
    let mut config = ctx.configs[&run.regime].clone();
    config.seed = run.run_seed;
    let data = RegimeData {
        labeled,
        unlabeled,
        dev: ctx.dev.as_ref(),
        test: ctx.test.as_ref(),
        shared_tapt: ctx.shared_tapt.get(&run.split_index),
    };
    let result = run_regime(run.regime, &data, &config)?;
    result.checkpoint.save(&run.dir.join("checkpoint"))?;
    let record = RunRecord {
        ratio: run.ratio,
        ratio_index: run.ratio_index,
        split_index: run.split_index,
        seed_index: run.seed_index,
        regime: run.regime,
        run_seed: run.run_seed,
        metric: ctx.metric.clone(),
        dev_value: result.dev.value,
        test_value: result.test.map(|m| m.value),
        checkpoint_id: result.checkpoint.id(),
        phases: result.phases,
        rounds: result.rounds,
    };
    fs::write(&record_path, serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Runs the full experiment matrix and emits `runs.jsonl` plus the report
/// files into the output directory. Completed runs found on disk are
/// reused, so an interrupted experiment resumes where it stopped.
pub fn execute_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    echo_resolved_config(config)?;
    let data = load_data(config, out)?;

    let mut configs = BTreeMap::new();
    for &regime in &config.regimes {
        configs.insert(regime, config.resolve_regime(Some(regime), &data.task, data.vocab_len)?);
    }

    let mut splits = BTreeMap::new();
    for (ri, &ratio) in config.labeled_ratios.iter().enumerate() {
        for si in 0..config.n_splits {
            let seed = seeding::derive(config.master_seed, &[&format!("split_{si}")]);
            splits.insert((ri, si), sample_split(&data.full_train, ratio, seed, &data.task)?);
        }
    }

    let adapting = [Regime::Tapt, Regime::Stti, Regime::Tfs];
    let mut shared_tapt = BTreeMap::new();
    if config.share_tapt && config.regimes.iter().any(|r| adapting.contains(r)) {
        let base = config.resolve_regime(None, &data.task, data.vocab_len)?;
        let corpus: Vec<Example> =
            data.full_train.iter().map(|(example, _)| example.clone()).collect();
        for si in 0..config.n_splits {
            let ckpt = shared_adaptation(out, &base, &corpus, config.master_seed, si)
                .map_err(|e| TfsError::Run {
                    context: format!("(shared adaptation, split {si})"),
                    source: Box::new(e),
                })?;
            shared_tapt.insert(si, ckpt);
        }
    }

    let mut plan = Vec::new();
    for (ri, &ratio) in config.labeled_ratios.iter().enumerate() {
        for si in 0..config.n_splits {
            for ki in 0..config.n_seeds_per_split {
                for &regime in &config.regimes {
                    let run_seed = seeding::derive(
                        config.master_seed,
                        &[
                            &format!("ratio_{ri}"),
                            &format!("split_{si}"),
                            &format!("seed_{ki}"),
                            regime.key(),
                        ],
                    );
                    plan.push(PlannedRun {
                        ratio,
                        ratio_index: ri,
                        split_index: si,
                        seed_index: ki,
                        regime,
                        run_seed,
                        dir: out
                            .join("runs")
                            .join(format!("ratio{ri}_split{si}_seed{ki}_{}", regime.key())),
                    });
                }
            }
        }
    }

    let ctx = RunContext {
        configs,
        splits,
        shared_tapt,
        dev: data.dev,
        test: data.test,
        metric: data.task.metric.name().to_string(),
    };
    let run_one = |run: &PlannedRun| {
        execute_one(run, &ctx).map_err(|e| TfsError::Run {
            context: format!(
                "(ratio {}, split {}, seed {}, {})",
                run.ratio, run.split_index, run.seed_index, run.regime
            ),
            source: Box::new(e),
        })
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<RunRecord>> = plan.par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<RunRecord>> = plan.iter().map(run_one).collect();
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut lines = String::new();
    for record in &records {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    fs::write(out.join(RUNS_FILE), lines)?;
    emit_report(&records, out)?;
    Ok(records)
}
