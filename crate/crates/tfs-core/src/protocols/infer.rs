//! Inference-mode helpers: batched prediction, metric scoring, and teacher
//! pseudo-labeling. No dropout anywhere in this file; outputs are pure
//! functions of (checkpoint, data).

use crate::data::{Example, Label, LabeledSet, TaskFamily, TaskKind, UnlabeledSet};
use crate::error::{Result, TfsError};
use crate::metrics::{self, MetricValue};
use crate::model::{encode, head_forward, stage_model, EncodedBatch, HeadKind, Model, ModelCheckpoint};
use crate::objectives::{PseudoLabel, PseudoLabeledSet};
use crate::tensor::{sigmoid, softmax_slice, Graph};

/// Sigmoid threshold for turning multi-label scores into label sets.
pub const MULTI_LABEL_THRESHOLD: f64 = 0.5;

/// One inference forward pass: raw head scores for a batch of examples.
fn batch_scores(model: &Model, kind: HeadKind, refs: &[&Example]) -> Result<(EncodedBatch, Vec<f64>)> {
    let config = model.config;
    let mut graph = Graph::new();
    let params = stage_model(&mut graph, model, false)?;
    let batch = EncodedBatch::build(refs, &config)?;
    let encoded = encode(&mut graph, &params, &config, &batch, None)?;
    let scores = head_forward(&mut graph, &params, &config, kind, &encoded, &batch)?;
    let values = graph.value(scores).to_vec();
    Ok((batch, values))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-example flat positions of first word pieces, batch-row order.
fn first_piece_rows(batch: &EncodedBatch, row: usize) -> Vec<usize> {
    let t = batch.seq_len;
    (row * t..(row + 1) * t).filter(|&i| batch.first_piece[i]).collect()
}

/// Hard predictions for a list of examples: argmax class, per-word argmax
/// tags, or the set of classes whose sigmoid clears the threshold.
pub fn predict(
    model: &Model,
    task: &TaskKind,
    examples: &[&Example],
    batch_size: usize,
) -> Result<Vec<Label>> {
    if examples.is_empty() {
        return Err(TfsError::Data("no examples to predict".into()));
    }
    let kind = HeadKind::for_task(task);
    if !model.has_head(kind) {
        return Err(TfsError::Protocol(format!(
            "model has no {} head to predict with",
            kind.prefix()
        )));
    }
    let k = task.classes;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let (batch, values) = batch_scores(model, kind, chunk)?;
        for row in 0..chunk.len() {
            let label = match task.family {
                TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification => {
                    Label::Class(argmax(&values[row * k..(row + 1) * k]))
                }
                TaskFamily::TokenTagging => {
                    let tags = first_piece_rows(&batch, row)
                        .into_iter()
                        .map(|p| argmax(&values[p * k..(p + 1) * k]))
                        .collect();
                    Label::Tags(tags)
                }
                TaskFamily::MultiLabelClassification => {
                    let set = (0..k)
                        .filter(|&c| sigmoid(values[row * k + c]) >= MULTI_LABEL_THRESHOLD)
                        .collect();
                    Label::Multi(set)
                }
            };
            out.push(label);
        }
    }
    Ok(out)
}

/// Score predictions against gold labels with the task's metric.
pub fn score_predictions(task: &TaskKind, predictions: &[Label], gold: &[&Label]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(TfsError::Metric(format!(
            "{} predictions against {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let classes = |labels: &[&Label]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => Ok(*c),
                other => Err(TfsError::Metric(format!("expected a class label, got {other:?}"))),
            })
            .collect()
    };
    let predictions_ref: Vec<&Label> = predictions.iter().collect();
    match task.metric {
        crate::data::MetricKind::Accuracy => {
            metrics::accuracy(&classes(&predictions_ref)?, &classes(gold)?)
        }
        crate::data::MetricKind::BinaryF1 => {
            metrics::binary_f1(&classes(&predictions_ref)?, &classes(gold)?, 1)
        }
        crate::data::MetricKind::SpanF1 => {
            let tags = |labels: &[&Label]| -> Result<Vec<Vec<usize>>> {
                labels
                    .iter()
                    .map(|l| match l {
                        Label::Tags(t) => Ok(t.clone()),
                        other => {
                            Err(TfsError::Metric(format!("expected tag labels, got {other:?}")))
                        }
                    })
                    .collect()
            };
            metrics::span_f1(&tags(&predictions_ref)?, &tags(gold)?, task.classes)
        }
        crate::data::MetricKind::MicroF1 => {
            let sets = |labels: &[&Label]| -> Result<Vec<Vec<usize>>> {
                labels
                    .iter()
                    .map(|l| match l {
                        Label::Multi(s) => Ok(s.clone()),
                        other => {
                            Err(TfsError::Metric(format!("expected label sets, got {other:?}")))
                        }
                    })
                    .collect()
            };
            metrics::micro_f1(&sets(&predictions_ref)?, &sets(gold)?, task.classes)
        }
    }
}

/// Predict a whole labeled set and score it.
pub fn evaluate(
    model: &Model,
    task: &TaskKind,
    set: &LabeledSet,
    batch_size: usize,
    split: &str,
) -> Result<MetricValue> {
    let refs: Vec<&Example> = set.examples().collect();
    let predictions = predict(model, task, &refs, batch_size)?;
    let gold: Vec<&Label> = set.items.iter().map(|(_, l)| l).collect();
    let value = score_predictions(task, &predictions, &gold)?;
    MetricValue::new(task.metric, value, split)
}

/// Soft teacher predictions for every unlabeled example, in set order:
/// softmax distributions for classification, per-first-piece softmax rows
/// for tagging, independent sigmoids for multi-label.
pub fn generate_pseudo_labels(
    teacher: &ModelCheckpoint,
    unlabeled: &UnlabeledSet,
    task: &TaskKind,
    batch_size: usize,
) -> Result<PseudoLabeledSet> {
    if unlabeled.is_empty() {
        return Err(TfsError::Protocol("cannot pseudo-label an empty unlabeled set".into()));
    }
    let model = Model::from_checkpoint(teacher);
    let kind = HeadKind::for_task(task);
    if !model.has_head(kind) {
        return Err(TfsError::Protocol(format!(
            "teacher {} has no {} head to pseudo-label with",
            teacher.id(),
            kind.prefix()
        )));
    }
    let k = task.classes;
    let mut items = Vec::with_capacity(unlabeled.len());
    for chunk in unlabeled.items.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, values) = batch_scores(&model, kind, &refs)?;
        for (row, example) in chunk.iter().enumerate() {
            let label = match task.family {
                TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification => {
                    PseudoLabel::Distribution(softmax_slice(&values[row * k..(row + 1) * k]))
                }
                TaskFamily::TokenTagging => PseudoLabel::PerWord(
                    first_piece_rows(&batch, row)
                        .into_iter()
                        .map(|p| softmax_slice(&values[p * k..(p + 1) * k]))
                        .collect(),
                ),
                TaskFamily::MultiLabelClassification => PseudoLabel::PerClass(
                    values[row * k..(row + 1) * k].iter().map(|&z| sigmoid(z)).collect(),
                ),
            };
            items.push((example.clone(), label));
        }
    }
    let set = PseudoLabeledSet { task: *task, teacher_id: teacher.id(), items };
    set.validate()?;
    Ok(set)
}
