//! The five runnable training regimes and the phases they are built from.
//!
//! Regime dispatch, with `ft = finetune`, `st = self_training`:
//!
//! - `FT`:   ft(random_init)
//! - `TAPT`: ft(tapt(random_init))
//! - `ST`:   st(teacher = ft(random_init), student init = random_init)
//! - `STTI`: st(teacher = ft(random_init), student init = tapt(random_init))
//! - `TFS`:  st(teacher = ft(tapt(random_init)), student init = tapt(random_init))
//!
//! Phase rng streams are derived from (seed, phase label) only, so phases
//! shared between regimes produce bit-identical checkpoints and, e.g., TFS
//! with zero self-training rounds collapses exactly onto TAPT.

pub mod infer;
pub mod train;

pub use infer::{
    evaluate, generate_pseudo_labels, predict, score_predictions, MULTI_LABEL_THRESHOLD,
};
pub use train::{carve_dev, run_finetune, run_self_training, run_tapt, DEV_FRACTION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Example, LabeledSet, TaskKind, UnlabeledSet};
use crate::error::{Result, TfsError};
use crate::metrics::MetricValue;
use crate::model::{init_model, EncoderConfig, Model, ModelCheckpoint};
use crate::seeding;
use crate::tensor::AdamConfig;

/// The five compared training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Ft,
    Tapt,
    St,
    Stti,
    Tfs,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Ft, Regime::Tapt, Regime::St, Regime::Stti, Regime::Tfs];

    /// Lowercase identifier used in configs, file names, and seed paths.
    pub fn key(&self) -> &'static str {
        match self {
            Regime::Ft => "ft",
            Regime::Tapt => "tapt",
            Regime::St => "st",
            Regime::Stti => "stti",
            Regime::Tfs => "tfs",
        }
    }

    /// Uppercase label used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Ft => "FT",
            Regime::Tapt => "TAPT",
            Regime::St => "ST",
            Regime::Stti => "STTI",
            Regime::Tfs => "TFS",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Regime {
    type Err = TfsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ft" => Ok(Regime::Ft),
            "tapt" => Ok(Regime::Tapt),
            "st" => Ok(Regime::St),
            "stti" => Ok(Regime::Stti),
            "tfs" => Ok(Regime::Tfs),
            other => Err(TfsError::Config(format!(
                "unknown regime {other:?}; expected one of ft, tapt, st, stti, tfs"
            ))),
        }
    }
}

fn default_tapt_epochs() -> usize {
    3
}
fn default_finetune_epochs() -> usize {
    4
}
fn default_st_epochs() -> usize {
    2
}
fn default_max_rounds() -> usize {
    3
}
fn default_patience() -> usize {
    1
}
fn default_batch_size() -> usize {
    16
}
fn default_lambda() -> f64 {
    1.0
}
fn default_mask_prob() -> f64 {
    0.15
}

/// Everything one regime run needs besides data: task, encoder shape,
/// schedule, batch sizes, objective knobs, optimizer, and the run seed.
///
/// `max_rounds` and the per-phase epoch counts may be zero; a zero collapses
/// that phase to the identity, which is how the regime degeneracies
/// (`max_rounds = 0` makes TFS ≡ TAPT and ST ≡ FT) are expressed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_tapt_epochs")]
    pub tapt_epochs: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_st_epochs")]
    pub st_epochs_per_round: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_batch_size")]
    pub mlm_batch_size: usize,
    #[serde(default = "default_batch_size")]
    pub pseudo_batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RegimeConfig {
    pub fn new(task: TaskKind) -> Self {
        RegimeConfig {
            task,
            encoder: EncoderConfig::default(),
            tapt_epochs: default_tapt_epochs(),
            finetune_epochs: default_finetune_epochs(),
            st_epochs_per_round: default_st_epochs(),
            max_rounds: default_max_rounds(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            mlm_batch_size: default_batch_size(),
            pseudo_batch_size: default_batch_size(),
            lambda: default_lambda(),
            mask_prob: default_mask_prob(),
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.encoder.validate()?;
        self.optimizer.validate()?;
        for (name, size) in [
            ("batch_size", self.batch_size),
            ("mlm_batch_size", self.mlm_batch_size),
            ("pseudo_batch_size", self.pseudo_batch_size),
        ] {
            if size == 0 {
                return Err(TfsError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.patience == 0 {
            return Err(TfsError::Config("patience must be at least 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(TfsError::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(TfsError::Config(format!(
                "mask_prob must lie strictly between 0 and 1, got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }
}

/// Per-phase training record: one entry per tapt/finetune phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: String,
    pub checkpoint_id: String,
    pub epoch_losses: Vec<f64>,
}

/// Per-round self-training record. Round indices are consecutive from 1 and
/// `teacher_id` of round r+1 always equals `student_id` of round r.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub teacher_id: String,
    pub student_id: String,
    pub pseudo_agreement: Option<f64>,
    pub pseudo_hash: String,
    pub dev_metric: f64,
    pub train_losses: Vec<f64>,
}

/// Immutable data for one regime run. `shared_tapt` short-circuits the
/// adaptation phase with a checkpoint computed elsewhere (the experiment
/// driver computes it once per split and hands it to every regime that
/// needs it); when absent, regimes that need adaptation run it themselves.
#[derive(Debug, Clone, Copy)]
pub struct RegimeData<'a> {
    pub labeled: &'a LabeledSet,
    pub unlabeled: &'a UnlabeledSet,
    pub dev: Option<&'a LabeledSet>,
    pub test: Option<&'a LabeledSet>,
    pub shared_tapt: Option<&'a ModelCheckpoint>,
}

/// Outcome of one regime on one (split, seed): the surviving checkpoint,
/// its dev/test metrics, and the phase/round training records.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub regime: Regime,
    pub checkpoint: ModelCheckpoint,
    pub dev: MetricValue,
    pub test: Option<MetricValue>,
    pub phases: Vec<PhaseLog>,
    pub rounds: Vec<RoundLog>,
}

fn adapted_checkpoint(
    data: &RegimeData,
    config: &RegimeConfig,
    random_init: &ModelCheckpoint,
    train_labeled: &LabeledSet,
    phases: &mut Vec<PhaseLog>,
) -> Result<ModelCheckpoint> {
    if let Some(shared) = data.shared_tapt {
        if !shared.config.same_architecture(&config.encoder) {
            return Err(TfsError::Protocol(format!(
                "shared adapted checkpoint {} does not match the configured architecture",
                shared.id()
            )));
        }
        return Ok(shared.clone());
    }
    let corpus: Vec<Example> = train_labeled
        .examples()
        .cloned()
        .chain(data.unlabeled.items.iter().cloned())
        .collect();
    let (ckpt, log) = run_tapt(random_init, &corpus, config)?;
    phases.push(log);
    Ok(ckpt)
}

/// Run one regime end to end on one dataset split. Pure in (data, config):
/// repeated invocations agree bit-for-bit.
pub fn run_regime(regime: Regime, data: &RegimeData, config: &RegimeConfig) -> Result<RunResult> {
    config.validate()?;
    let (train_labeled, dev) = match data.dev {
        Some(dev) => {
            if dev.is_empty() {
                return Err(TfsError::Protocol("supplied dev set is empty".into()));
            }
            (data.labeled.clone(), dev.clone())
        }
        None => carve_dev(
            data.labeled,
            DEV_FRACTION,
            seeding::derive(config.seed, &["dev_carve"]),
        )?,
    };
    let random_init = init_model(&config.encoder, &[], seeding::derive(config.seed, &["init"]))?;
    let mut phases = Vec::new();
    let (checkpoint, rounds) = match regime {
        Regime::Ft => {
            let (ckpt, log) = run_finetune(&random_init, &train_labeled, config)?;
            phases.push(log);
            (ckpt, Vec::new())
        }
        Regime::Tapt => {
            let adapted =
                adapted_checkpoint(data, config, &random_init, &train_labeled, &mut phases)?;
            let (ckpt, log) = run_finetune(&adapted, &train_labeled, config)?;
            phases.push(log);
            (ckpt, Vec::new())
        }
        Regime::St => {
            let (teacher, log) = run_finetune(&random_init, &train_labeled, config)?;
            phases.push(log);
            run_self_training(&teacher, &random_init, &train_labeled, data.unlabeled, &dev, config)?
        }
        Regime::Stti => {
            let adapted =
                adapted_checkpoint(data, config, &random_init, &train_labeled, &mut phases)?;
            let (teacher, log) = run_finetune(&random_init, &train_labeled, config)?;
            phases.push(log);
            run_self_training(&teacher, &adapted, &train_labeled, data.unlabeled, &dev, config)?
        }
        Regime::Tfs => {
            let adapted =
                adapted_checkpoint(data, config, &random_init, &train_labeled, &mut phases)?;
            let (teacher, log) = run_finetune(&adapted, &train_labeled, config)?;
            phases.push(log);
            run_self_training(&teacher, &adapted, &train_labeled, data.unlabeled, &dev, config)?
        }
    };
    let model = Model::from_checkpoint(&checkpoint);
    let dev_metric = evaluate(&model, &config.task, &dev, config.batch_size, "dev")?;
    let test_metric = match data.test {
        Some(test) => Some(evaluate(&model, &config.task, test, config.batch_size, "test")?),
        None => None,
    };
    Ok(RunResult {
        regime,
        checkpoint,
        dev: dev_metric,
        test: test_metric,
        phases,
        rounds,
    })
}
