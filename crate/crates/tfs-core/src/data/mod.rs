//! Datasets: task descriptors, tokenized examples, JSONL loading, labeled
//! subset sampling, and the synthetic corpus generator.
//!
//! An [`Example`] is text already tokenized against a fixed [`Vocabulary`]
//! and truncated so that the encoded sequence (with `[CLS]`/`[SEP]` added)
//! fits the model's position budget. Labels stay in a separate enum so the
//! same example type serves labeled, unlabeled, and pseudo-labeled roles.

pub mod dataset;
pub mod split;
pub mod synthetic;
pub mod vocab;

pub use dataset::{load_dataset, load_unlabeled};
pub use split::sample_split;
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use vocab::{TokenizedText, Vocabulary, CLS, MASK, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TfsError};

/// The four task shapes the encoder heads support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SingleSentenceClassification,
    PairClassification,
    TokenTagging,
    MultiLabelClassification,
}

/// Evaluation metric selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    BinaryF1,
    SpanF1,
    MicroF1,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::BinaryF1 => "binary_f1",
            MetricKind::SpanF1 => "span_f1",
            MetricKind::MicroF1 => "micro_f1",
        }
    }
}

/// Task descriptor: family, label-space size, and the metric to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskKind {
    pub family: TaskFamily,
    pub classes: usize,
    pub metric: MetricKind,
}

impl TaskKind {
    pub fn new(family: TaskFamily, classes: usize, metric: MetricKind) -> Result<Self> {
        let task = Self { family, classes, metric };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(TfsError::Config(format!(
                "task needs at least 2 classes, got {}",
                self.classes
            )));
        }
        let ok = match self.metric {
            MetricKind::Accuracy => matches!(
                self.family,
                TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification
            ),
            MetricKind::BinaryF1 => {
                self.classes == 2
                    && matches!(
                        self.family,
                        TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification
                    )
            }
            MetricKind::SpanF1 => self.family == TaskFamily::TokenTagging,
            MetricKind::MicroF1 => self.family == TaskFamily::MultiLabelClassification,
        };
        if !ok {
            return Err(TfsError::Config(format!(
                "metric {:?} does not apply to task family {:?} with {} classes",
                self.metric, self.family, self.classes
            )));
        }
        if self.family == TaskFamily::TokenTagging && self.classes % 2 == 0 {
            // Tag space is O plus B/I pairs per entity type, so it is odd.
            return Err(TfsError::Config(format!(
                "token tagging needs an odd class count (O plus B/I pairs), got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Number of special tokens in an encoded sequence for this family.
    pub fn specials_per_sequence(&self) -> usize {
        match self.family {
            TaskFamily::PairClassification => 3, // [CLS] a [SEP] b [SEP]
            _ => 2,                              // [CLS] a [SEP]
        }
    }
}

/// Gold or pseudo label for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Single class index.
    Class(usize),
    /// One tag index per word (not per piece).
    Tags(Vec<usize>),
    /// Sorted, deduplicated set of active class indices (possibly empty).
    Multi(Vec<usize>),
}

impl Label {
    pub fn validate(&self, task: &TaskKind) -> Result<()> {
        match (self, task.family) {
            (Label::Class(c), TaskFamily::SingleSentenceClassification)
            | (Label::Class(c), TaskFamily::PairClassification) => {
                if *c >= task.classes {
                    return Err(TfsError::Data(format!(
                        "class {c} out of range for {} classes",
                        task.classes
                    )));
                }
            }
            (Label::Tags(tags), TaskFamily::TokenTagging) => {
                for &t in tags {
                    if t >= task.classes {
                        return Err(TfsError::Data(format!(
                            "tag {t} out of range for {} classes",
                            task.classes
                        )));
                    }
                }
            }
            (Label::Multi(set), TaskFamily::MultiLabelClassification) => {
                for &c in set {
                    if c >= task.classes {
                        return Err(TfsError::Data(format!(
                            "label {c} out of range for {} classes",
                            task.classes
                        )));
                    }
                }
                if set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(TfsError::Data(
                        "multi-label set must be strictly sorted".into(),
                    ));
                }
            }
            (label, family) => {
                return Err(TfsError::Data(format!(
                    "label shape {label:?} does not match task family {family:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One tokenized input, truncated to fit the encoder's position budget.
///
/// `word_boundaries` marks the first piece of each original word in
/// `segment_a` (used by tagging heads); it is empty for non-tagging tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Zero-based record index in the source file or generator.
    pub id: usize,
    pub segment_a: Vec<u32>,
    pub segment_b: Option<Vec<u32>>,
    pub word_boundaries: Vec<bool>,
}

impl Example {
    /// Total encoded length once `[CLS]`/`[SEP]` markers are added.
    pub fn encoded_len(&self) -> usize {
        let b = self.segment_b.as_ref().map(|b| b.len() + 1).unwrap_or(0);
        2 + self.segment_a.len() + b
    }

    /// Piece ids in reading order, without special markers.
    pub fn pieces(&self) -> impl Iterator<Item = u32> + '_ {
        self.segment_a
            .iter()
            .chain(self.segment_b.iter().flatten())
            .copied()
    }
}

/// Examples paired with gold labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub items: Vec<(Example, Label)>,
}

/// Examples without labels (the pool for masking and pseudo-labeling).
#[derive(Debug, Clone, Default)]
pub struct UnlabeledSet {
    pub items: Vec<Example>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.items.iter().map(|(e, _)| e)
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
