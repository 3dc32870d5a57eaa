//! Synthetic single-sentence classification corpora.
//!
//! Each class owns a disjoint set of signal tokens; the rest of the
//! vocabulary is shared background. A text is a bag of tokens whose first
//! position always carries a signal token of the clean class, so every text
//! is classifiable in principle. Labels are then corrupted by resampling
//! uniformly over all classes with probability `noise_rate`, which leaves a
//! `noise_rate * (classes - 1) / classes` expected fraction of flipped
//! labels. The clean label is kept alongside for diagnostics.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::vocab::{Vocabulary, SPECIAL_TOKENS};
use crate::data::{Example, Label, MetricKind, TaskFamily, TaskKind};
use crate::error::{Result, TfsError};

/// Probability that a non-leading position draws a signal token of the
/// clean class rather than a background token. Low enough that a handful of
/// labeled examples does not exhaust the signal set.
const SIGNAL_RATE: f64 = 0.3;

/// Fraction of the vocabulary reserved as signal, split evenly per class.
const SIGNAL_SHARE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Content-word count; the token table adds the five specials on top.
    pub vocab_size: usize,
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 200,
            classes: 2,
            min_len: 4,
            max_len: 12,
            train_examples: 5000,
            dev_examples: 500,
            test_examples: 500,
            noise_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(TfsError::Config(format!(
                "synthetic corpus needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.vocab_size < 2 * self.classes {
            return Err(TfsError::Config(format!(
                "vocab_size {} is too small for {} classes; need at least {}",
                self.vocab_size,
                self.classes,
                2 * self.classes
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(TfsError::Config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.train_examples == 0 || self.dev_examples == 0 || self.test_examples == 0 {
            return Err(TfsError::Config(
                "train, dev, and test example counts must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(TfsError::Config(format!(
                "noise_rate must be in [0, 1), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Signal tokens per class.
    pub fn signal_per_class(&self) -> usize {
        (self.vocab_size / (SIGNAL_SHARE * self.classes)).max(1)
    }

    /// The task every corpus from this spec poses.
    pub fn task(&self) -> TaskKind {
        TaskKind {
            family: TaskFamily::SingleSentenceClassification,
            classes: self.classes,
            metric: MetricKind::Accuracy,
        }
    }
}

/// One generated text with its noisy label and the label before corruption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticExample {
    pub ids: Vec<u32>,
    pub text: String,
    pub label: usize,
    pub clean_label: usize,
}

/// Generated corpus: three splits sharing one vocabulary and noise process.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub vocabulary: Vocabulary,
    pub train: Vec<SyntheticExample>,
    pub dev: Vec<SyntheticExample>,
    pub test: Vec<SyntheticExample>,
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let vocabulary = Vocabulary::from_tokens(words.iter().cloned())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = generate_split(spec, &words, spec.train_examples, &mut rng);
    let dev = generate_split(spec, &words, spec.dev_examples, &mut rng);
    let test = generate_split(spec, &words, spec.test_examples, &mut rng);
    Ok(SyntheticCorpus { spec: *spec, vocabulary, train, dev, test })
}

fn generate_split(
    spec: &SyntheticSpec,
    words: &[String],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<SyntheticExample> {
    let s = spec.signal_per_class();
    let background_start = spec.classes * s;
    let specials = SPECIAL_TOKENS.len() as u32;
    (0..count)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let clean_label = rng.gen_range(0..spec.classes);
            let mut word_idx = Vec::with_capacity(len);
            for pos in 0..len {
                let idx = if pos == 0 || rng.gen::<f64>() < SIGNAL_RATE {
                    clean_label * s + rng.gen_range(0..s)
                } else {
                    rng.gen_range(background_start..spec.vocab_size)
                };
                word_idx.push(idx);
            }
            let label = if spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
                rng.gen_range(0..spec.classes)
            } else {
                clean_label
            };
            let ids = word_idx.iter().map(|&i| specials + i as u32).collect();
            let mut text = String::new();
            for (i, &w) in word_idx.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                }
                text.push_str(&words[w]);
            }
            SyntheticExample { ids, text, label, clean_label }
        })
        .collect()
}

impl SyntheticCorpus {
    pub fn task(&self) -> TaskKind {
        self.spec.task()
    }

    fn split(&self, name: &str) -> Result<&[SyntheticExample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(TfsError::Config(format!("unknown split {other:?}"))),
        }
    }

    /// Materializes a split as labeled examples, ids numbered from zero.
    pub fn labeled_items(&self, split: &str) -> Result<Vec<(Example, Label)>> {
        Ok(self
            .split(split)?
            .iter()
            .enumerate()
            .map(|(id, ex)| {
                let example = Example {
                    id,
                    segment_a: ex.ids.clone(),
                    segment_b: None,
                    word_boundaries: Vec::new(),
                };
                (example, Label::Class(ex.label))
            })
            .collect())
    }

    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl`, and `vocab.txt` into
    /// `dir`, using the labeled single-sentence record schema.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in ["train", "dev", "test"] {
            let mut body = String::new();
            for ex in self.split(split)? {
                let record = serde_json::json!({ "text": ex.text, "label": ex.label });
                let _ = writeln!(body, "{record}");
            }
            std::fs::write(dir.join(format!("{split}.jsonl")), body)?;
        }
        self.vocabulary.save(&dir.join("vocab.txt"))?;
        Ok(())
    }
}
