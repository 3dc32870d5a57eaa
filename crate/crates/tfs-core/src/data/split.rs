//! Labeled/unlabeled split sampling.
//!
//! Given a fully labeled training set, keep a seeded random fraction as the
//! labeled subset and strip labels from the rest to form the unlabeled pool.
//! Classification tasks are stratified: every class keeps at least one
//! labeled example so the label space never collapses at tiny ratios.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Label, LabeledSet, TaskFamily, TaskKind, UnlabeledSet};
use crate::error::{Result, TfsError};

/// Splits `data` into a labeled subset of `round(ratio * n)` examples and an
/// unlabeled pool of the rest. Both halves keep ascending original order.
pub fn sample_split(
    data: &[(crate::data::Example, Label)],
    ratio: f64,
    seed: u64,
    task: &TaskKind,
) -> Result<(LabeledSet, UnlabeledSet)> {
    if !(ratio > 0.0 && ratio <= 1.0) || !ratio.is_finite() {
        return Err(TfsError::Config(format!(
            "labeled ratio must be in (0, 1], got {ratio}"
        )));
    }
    if data.is_empty() {
        return Err(TfsError::Data("cannot split an empty dataset".into()));
    }
    let n = data.len();
    let n_labeled = ((ratio * n as f64).round() as usize).min(n);
    if n_labeled == 0 {
        return Err(TfsError::Config(format!(
            "ratio {ratio} rounds to zero labeled examples out of {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let stratify = matches!(
        task.family,
        TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification
    );
    let mut picked = vec![false; n];
    let mut remaining = n_labeled;

    if stratify {
        let mut class_seen = vec![false; task.classes];
        let mut classes_present = 0;
        let mut first_of_class: Vec<Option<usize>> = vec![None; task.classes];
        for &i in &order {
            let Label::Class(c) = data[i].1 else {
                return Err(TfsError::Data("classification split found a non-class label".into()));
            };
            if !class_seen[c] {
                class_seen[c] = true;
                classes_present += 1;
                first_of_class[c] = Some(i);
            }
        }
        if n_labeled < classes_present {
            return Err(TfsError::Config(format!(
                "ratio {ratio} keeps {n_labeled} labeled examples but the data has \
                 {classes_present} classes; stratification needs one per class"
            )));
        }
        for idx in first_of_class.into_iter().flatten() {
            picked[idx] = true;
            remaining -= 1;
        }
    }

    for &i in &order {
        if remaining == 0 {
            break;
        }
        if !picked[i] {
            picked[i] = true;
            remaining -= 1;
        }
    }

    let mut labeled = LabeledSet::default();
    let mut unlabeled = UnlabeledSet::default();
    for (i, item) in data.iter().enumerate() {
        if picked[i] {
            labeled.items.push(item.clone());
        } else {
            unlabeled.items.push(item.0.clone());
        }
    }
    debug_assert_eq!(labeled.len() + unlabeled.len(), n);
    debug_assert_eq!(labeled.len(), n_labeled);
    Ok((labeled, unlabeled))
}
