//! The three training objectives.
//!
//! All losses are means (per masked token or per example), so magnitudes do
//! not scale with batch size. Each builder comes in two layers: a full
//! version that runs the encoder from staged parameters, and a `from_scores`
//! version that starts at raw head scores, which is what gradient-check and
//! semantics tests exercise. Normalization (softmax / sigmoid) always
//! happens inside the loss, and position selection (masked rows, first-piece
//! rows) gathers *after* the row-wise normalization, so unselected rows get
//! an exactly zero gradient.

use rand_chacha::ChaCha8Rng;

use crate::data::{Label, TaskFamily, TaskKind};
use crate::error::{Result, TfsError};
use crate::model::{encode, head_forward, EncodedBatch, EncoderConfig, HeadKind, ParamNodes};
use crate::objectives::masking::MaskedBatch;
use crate::objectives::PseudoLabel;
use crate::tensor::{Graph, NodeId};

/// Masked-token reconstruction loss: run the encoder over the corrupted
/// batch and score original ids at masked positions.
pub fn mlm_loss(
    graph: &mut Graph,
    params: &ParamNodes,
    config: &EncoderConfig,
    masked: &MaskedBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let encoded = encode(graph, params, config, &masked.batch, dropout_rng)?;
    let logits = head_forward(graph, params, config, HeadKind::Mlm, &encoded, &masked.batch)?;
    mlm_loss_from_logits(graph, logits, masked)
}

/// Mean of -log p(original | corrupted) over masked positions, from full
/// per-position vocabulary logits `[batch*seq, vocab]`.
pub fn mlm_loss_from_logits(
    graph: &mut Graph,
    logits: NodeId,
    masked: &MaskedBatch,
) -> Result<NodeId> {
    let positions = masked.masked_positions();
    if positions.is_empty() {
        return Err(TfsError::Objective("no masked positions to reconstruct".into()));
    }
    let shape = graph.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != masked.batch.ids.len() {
        return Err(TfsError::Dimension(format!(
            "mlm logits shape {shape:?} does not cover {} positions",
            masked.batch.ids.len()
        )));
    }
    let log_probs = graph.log_softmax(logits, 1)?;
    let rows = graph.gather_rows(log_probs, positions)?;
    let picked = graph.pick_per_row(rows, masked.targets())?;
    let mean = graph.mean_all(picked)?;
    graph.scale(mean, -1.0)
}

/// Task loss: cross-entropy on `[CLS]` scores for classification, on
/// first-piece positions for tagging, and mean binary cross-entropy over
/// all class slots for multi-label.
pub fn supervised_loss(
    graph: &mut Graph,
    params: &ParamNodes,
    config: &EncoderConfig,
    task: &TaskKind,
    batch: &EncodedBatch,
    labels: &[Label],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let encoded = encode(graph, params, config, batch, dropout_rng)?;
    let scores = head_forward(graph, params, config, HeadKind::for_task(task), &encoded, batch)?;
    supervised_loss_from_scores(graph, task, scores, batch, labels)
}

pub fn supervised_loss_from_scores(
    graph: &mut Graph,
    task: &TaskKind,
    scores: NodeId,
    batch: &EncodedBatch,
    labels: &[Label],
) -> Result<NodeId> {
    if labels.len() != batch.batch {
        return Err(TfsError::Objective(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.batch
        )));
    }
    for label in labels {
        label.validate(task)?;
    }
    match task.family {
        TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification => {
            expect_shape(graph, scores, &[batch.batch, task.classes])?;
            let idx = class_indices(labels)?;
            let log_probs = graph.log_softmax(scores, 1)?;
            let picked = graph.pick_per_row(log_probs, idx)?;
            let mean = graph.mean_all(picked)?;
            graph.scale(mean, -1.0)
        }
        TaskFamily::TokenTagging => {
            expect_shape(graph, scores, &[batch.batch * batch.seq_len, task.classes])?;
            let (positions, tags) = first_piece_targets(batch, labels)?;
            let log_probs = graph.log_softmax(scores, 1)?;
            let rows = graph.gather_rows(log_probs, positions)?;
            let picked = graph.pick_per_row(rows, tags)?;
            let mean = graph.mean_all(picked)?;
            graph.scale(mean, -1.0)
        }
        TaskFamily::MultiLabelClassification => {
            expect_shape(graph, scores, &[batch.batch, task.classes])?;
            let targets = dense_multi_targets(labels, task.classes)?;
            graph.binary_cross_entropy_mean(scores, &targets)
        }
    }
}

/// Distillation term of the self-training objective: mean KL from the
/// teacher's distributions to the student's, with the teacher held constant.
/// For multi-label heads this is the mean Bernoulli KL, computed as binary
/// cross-entropy minus the (constant) teacher entropy.
pub fn distillation_term_from_scores(
    graph: &mut Graph,
    task: &TaskKind,
    scores: NodeId,
    batch: &EncodedBatch,
    pseudo: &[PseudoLabel],
) -> Result<NodeId> {
    if pseudo.len() != batch.batch {
        return Err(TfsError::Objective(format!(
            "{} pseudo labels for a batch of {}",
            pseudo.len(),
            batch.batch
        )));
    }
    for label in pseudo {
        label.validate(task)?;
    }
    match task.family {
        TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification => {
            expect_shape(graph, scores, &[batch.batch, task.classes])?;
            let mut teacher = Vec::with_capacity(batch.batch * task.classes);
            for label in pseudo {
                let PseudoLabel::Distribution(p) = label else { unreachable!("validated") };
                teacher.extend_from_slice(p);
            }
            let log_q = graph.log_softmax(scores, 1)?;
            graph.kl_divergence(&teacher, log_q)
        }
        TaskFamily::TokenTagging => {
            expect_shape(graph, scores, &[batch.batch * batch.seq_len, task.classes])?;
            let (positions, teacher) = per_word_teacher(batch, pseudo, task.classes)?;
            let log_probs = graph.log_softmax(scores, 1)?;
            let rows = graph.gather_rows(log_probs, positions)?;
            graph.kl_divergence(&teacher, rows)
        }
        TaskFamily::MultiLabelClassification => {
            expect_shape(graph, scores, &[batch.batch, task.classes])?;
            let mut teacher = Vec::with_capacity(batch.batch * task.classes);
            for label in pseudo {
                let PseudoLabel::PerClass(p) = label else { unreachable!("validated") };
                teacher.extend_from_slice(p);
            }
            let bce = graph.binary_cross_entropy_mean(scores, &teacher)?;
            let entropy = mean_bernoulli_entropy(&teacher);
            let neg_entropy = graph.constant(vec![1], vec![-entropy])?;
            graph.add(bce, neg_entropy)
        }
    }
}

/// Self-training objective: supervised loss on the labeled batch plus
/// `lambda` times the distillation term on the pseudo-labeled batch. With no
/// pseudo batch this *is* the supervised loss, exactly.
#[allow(clippy::too_many_arguments)]
pub fn st_loss(
    graph: &mut Graph,
    params: &ParamNodes,
    config: &EncoderConfig,
    task: &TaskKind,
    labeled: (&EncodedBatch, &[Label]),
    pseudo: Option<(&EncodedBatch, &[PseudoLabel])>,
    lambda: f64,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(TfsError::Config(format!(
            "distillation weight must be finite and non-negative, got {lambda}"
        )));
    }
    let ce = supervised_loss(
        graph,
        params,
        config,
        task,
        labeled.0,
        labeled.1,
        dropout_rng.as_deref_mut(),
    )?;
    let Some((pseudo_batch, pseudo_labels)) = pseudo else {
        return Ok(ce);
    };
    let encoded = encode(graph, params, config, pseudo_batch, dropout_rng)?;
    let scores =
        head_forward(graph, params, config, HeadKind::for_task(task), &encoded, pseudo_batch)?;
    let kl = distillation_term_from_scores(graph, task, scores, pseudo_batch, pseudo_labels)?;
    let weighted = graph.scale(kl, lambda)?;
    graph.add(ce, weighted)
}

fn expect_shape(graph: &Graph, node: NodeId, expected: &[usize]) -> Result<()> {
    if graph.shape(node) != expected {
        return Err(TfsError::Dimension(format!(
            "scores have shape {:?}, expected {expected:?}",
            graph.shape(node)
        )));
    }
    Ok(())
}

fn class_indices(labels: &[Label]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| match l {
            Label::Class(c) => Ok(*c),
            other => Err(TfsError::Objective(format!(
                "classification loss got a non-class label {other:?}"
            ))),
        })
        .collect()
}

/// Flat first-piece positions and their tags, batch-row order. Each
/// example's tag count must equal its first-piece count.
fn first_piece_targets(
    batch: &EncodedBatch,
    labels: &[Label],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = batch.seq_len;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (row, label) in labels.iter().enumerate() {
        let Label::Tags(tags) = label else {
            return Err(TfsError::Objective(format!(
                "tagging loss got a non-tag label {label:?}"
            )));
        };
        let row_positions: Vec<usize> =
            (row * t..(row + 1) * t).filter(|&i| batch.first_piece[i]).collect();
        if row_positions.len() != tags.len() {
            return Err(TfsError::Data(format!(
                "example {row} has {} tagged words but {} tags",
                row_positions.len(),
                tags.len()
            )));
        }
        positions.extend(row_positions);
        targets.extend_from_slice(tags);
    }
    if positions.is_empty() {
        return Err(TfsError::Objective("batch has no tagged word positions".into()));
    }
    Ok((positions, targets))
}

/// Flat first-piece positions and concatenated per-word teacher rows.
fn per_word_teacher(
    batch: &EncodedBatch,
    pseudo: &[PseudoLabel],
    classes: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = batch.seq_len;
    let mut positions = Vec::new();
    let mut teacher = Vec::new();
    for (row, label) in pseudo.iter().enumerate() {
        let PseudoLabel::PerWord(rows) = label else { unreachable!("validated") };
        let row_positions: Vec<usize> =
            (row * t..(row + 1) * t).filter(|&i| batch.first_piece[i]).collect();
        if row_positions.len() != rows.len() {
            return Err(TfsError::Data(format!(
                "example {row} has {} tagged words but {} teacher rows",
                row_positions.len(),
                rows.len()
            )));
        }
        positions.extend(row_positions);
        for dist in rows {
            debug_assert_eq!(dist.len(), classes);
            teacher.extend_from_slice(dist);
        }
    }
    if positions.is_empty() {
        return Err(TfsError::Objective("batch has no tagged word positions".into()));
    }
    Ok((positions, teacher))
}

fn dense_multi_targets(labels: &[Label], classes: usize) -> Result<Vec<f64>> {
    let mut targets = vec![0.0; labels.len() * classes];
    for (row, label) in labels.iter().enumerate() {
        let Label::Multi(set) = label else {
            return Err(TfsError::Objective(format!(
                "multi-label loss got a non-set label {label:?}"
            )));
        };
        for &c in set {
            targets[row * classes + c] = 1.0;
        }
    }
    Ok(targets)
}

/// Mean entropy of independent Bernoulli variables with probabilities `p`,
/// with 0 ln 0 = 0.
fn mean_bernoulli_entropy(p: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .map(|&p| {
            let mut h = 0.0;
            if p > 0.0 {
                h -= p * p.ln();
            }
            if p < 1.0 {
                h -= (1.0 - p) * (1.0 - p).ln();
            }
            h
        })
        .sum();
    total / p.len() as f64
}
