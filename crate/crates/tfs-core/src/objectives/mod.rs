//! Training objectives: dynamic masking, masked-token reconstruction, task
//! losses, and the joint self-training objective with its teacher-provided
//! soft targets.

pub mod losses;
pub mod masking;

pub use losses::{
    distillation_term_from_scores, mlm_loss, mlm_loss_from_logits, st_loss, supervised_loss,
    supervised_loss_from_scores,
};
pub use masking::{apply_dynamic_mask, MaskedBatch};

use sha2::{Digest, Sha256};

use crate::data::{Example, TaskFamily, TaskKind};
use crate::error::{Result, TfsError};

/// A teacher's soft prediction for one unlabeled example. Shape follows the
/// task: one distribution over classes, one distribution per tagged word, or
/// one independent probability per class.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoLabel {
    Distribution(Vec<f64>),
    PerWord(Vec<Vec<f64>>),
    PerClass(Vec<f64>),
}

const DIST_SUM_TOLERANCE: f64 = 1e-5;

fn check_distribution(p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(TfsError::Objective(format!(
            "distribution over {} classes for a {classes}-class task",
            p.len()
        )));
    }
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(TfsError::Distribution("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
        return Err(TfsError::Distribution(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

impl PseudoLabel {
    pub fn validate(&self, task: &TaskKind) -> Result<()> {
        match (self, task.family) {
            (
                PseudoLabel::Distribution(p),
                TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification,
            ) => check_distribution(p, task.classes),
            (PseudoLabel::PerWord(rows), TaskFamily::TokenTagging) => {
                if rows.is_empty() {
                    return Err(TfsError::Objective("per-word pseudo label has no words".into()));
                }
                rows.iter().try_for_each(|row| check_distribution(row, task.classes))
            }
            (PseudoLabel::PerClass(p), TaskFamily::MultiLabelClassification) => {
                if p.len() != task.classes {
                    return Err(TfsError::Objective(format!(
                        "{} per-class probabilities for a {}-class task",
                        p.len(),
                        task.classes
                    )));
                }
                if p.iter().any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v)) {
                    return Err(TfsError::Distribution(
                        "per-class probabilities must lie in [0, 1]".into(),
                    ));
                }
                Ok(())
            }
            (label, family) => Err(TfsError::Objective(format!(
                "pseudo label {} does not fit task family {family:?}",
                label.kind_name()
            ))),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            PseudoLabel::Distribution(_) => "distribution",
            PseudoLabel::PerWord(_) => "per-word",
            PseudoLabel::PerClass(_) => "per-class",
        }
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        let feed = |hasher: &mut Sha256, values: &[f64]| {
            hasher.update((values.len() as u64).to_le_bytes());
            for v in values {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        match self {
            PseudoLabel::Distribution(p) => {
                hasher.update([0u8]);
                feed(hasher, p);
            }
            PseudoLabel::PerWord(rows) => {
                hasher.update([1u8]);
                hasher.update((rows.len() as u64).to_le_bytes());
                for row in rows {
                    feed(hasher, row);
                }
            }
            PseudoLabel::PerClass(p) => {
                hasher.update([2u8]);
                feed(hasher, p);
            }
        }
    }

    /// Hard decisions: argmax per distribution, or thresholded at one half
    /// per class slot. Used only to score agreement between rounds.
    fn decisions(&self) -> Vec<usize> {
        fn argmax(p: &[f64]) -> usize {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            best
        }
        match self {
            PseudoLabel::Distribution(p) => vec![argmax(p)],
            PseudoLabel::PerWord(rows) => rows.iter().map(|r| argmax(r)).collect(),
            PseudoLabel::PerClass(p) => p.iter().map(|&v| usize::from(v >= 0.5)).collect(),
        }
    }
}

/// A teacher's predictions over a whole unlabeled set, in set order.
#[derive(Debug, Clone)]
pub struct PseudoLabeledSet {
    pub task: TaskKind,
    pub teacher_id: String,
    pub items: Vec<(Example, PseudoLabel)>,
}

impl PseudoLabeledSet {
    pub fn validate(&self) -> Result<()> {
        self.items.iter().try_for_each(|(_, label)| label.validate(&self.task))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Content fingerprint over (example id, exact label bits); two sets
    /// hash equal iff every prediction is bit-identical.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.items.len() as u64).to_le_bytes());
        for (example, label) in &self.items {
            hasher.update((example.id as u64).to_le_bytes());
            label.hash_into(&mut hasher);
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fraction of hard decisions on which two rounds of pseudo labels
    /// agree. Both sets must cover the same examples in the same order.
    pub fn agreement(&self, other: &PseudoLabeledSet) -> Result<f64> {
        if self.items.len() != other.items.len() {
            return Err(TfsError::Objective(format!(
                "cannot compare pseudo label sets of sizes {} and {}",
                self.items.len(),
                other.items.len()
            )));
        }
        let mut matches = 0usize;
        let mut total = 0usize;
        for ((a_ex, a), (b_ex, b)) in self.items.iter().zip(&other.items) {
            if a_ex.id != b_ex.id {
                return Err(TfsError::Objective(
                    "pseudo label sets cover different examples".into(),
                ));
            }
            let (da, db) = (a.decisions(), b.decisions());
            if da.len() != db.len() {
                return Err(TfsError::Objective(
                    "pseudo label sets disagree on decision counts".into(),
                ));
            }
            matches += da.iter().zip(&db).filter(|(x, y)| x == y).count();
            total += da.len();
        }
        if total == 0 {
            return Err(TfsError::Objective("no decisions to compare".into()));
        }
        Ok(matches as f64 / total as f64)
    }
}
