//! Task metrics, multi-run aggregation, and the additive-gain reference.
//!
//! Everything here is a pure function over plain slices; model inference
//! and thresholding happen upstream. Degenerate F1 cases (no positives
//! anywhere) score 0, matching the conservative convention of common
//! sequence scorers.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::MetricKind;
use crate::error::{Result, TfsError};

/// A single scored metric on one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: MetricKind,
    pub value: f64,
    pub split: String,
}

impl MetricValue {
    pub fn new(metric: MetricKind, value: f64, split: impl Into<String>) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(TfsError::Metric(format!(
                "{} value {value} is outside [0, 1]",
                metric.name()
            )));
        }
        Ok(MetricValue { metric, value, split: split.into() })
    }
}

/// Mean and spread of one regime's metric across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub regime: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub per_run: Vec<f64>,
    pub gain_over_ft: Option<f64>,
}

impl AggregateResult {
    pub fn with_gain_over(mut self, ft: &AggregateResult) -> Result<Self> {
        if self.metric != ft.metric {
            return Err(TfsError::Metric(format!(
                "cannot compute a gain of {} over {}",
                self.metric, ft.metric
            )));
        }
        self.gain_over_ft = Some(self.mean - ft.mean);
        Ok(self)
    }
}

fn check_lengths(predictions: usize, gold: usize) -> Result<()> {
    if predictions == 0 {
        return Err(TfsError::Metric("cannot score an empty prediction list".into()));
    }
    if predictions != gold {
        return Err(TfsError::Metric(format!(
            "{predictions} predictions against {gold} gold labels"
        )));
    }
    Ok(())
}

/// Fraction of predictions exactly equal to gold.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / predictions.len() as f64)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denominator = 2 * tp + fp + fn_;
    if denominator == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / denominator as f64
}

/// F1 of the positive class over binary labels; 0 when there are no
/// positives anywhere.
pub fn binary_f1(predictions: &[usize], gold: &[usize], positive_class: usize) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    if positive_class > 1 {
        return Err(TfsError::Metric(format!(
            "positive class {positive_class} is not a binary label"
        )));
    }
    if predictions.iter().chain(gold).any(|&l| l > 1) {
        return Err(TfsError::Metric("binary F1 needs labels in {0, 1}".into()));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p == positive_class, g == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// One labeled span: `(entity type, start, inclusive end)`.
pub type Span = (usize, usize, usize);

/// Decode a BIO tag sequence into spans. Tag 0 is outside; odd tags open an
/// entity of type `(t - 1) / 2`, even tags continue it. An inside tag with
/// no matching open entity starts a new span, so slightly malformed
/// sequences still score.
pub fn bio_spans(tags: &[usize], classes: usize) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        if t >= classes {
            return Err(TfsError::Metric(format!(
                "tag {t} is out of range for {classes} tag classes"
            )));
        }
        if t == 0 {
            if let Some((kind, start)) = open.take() {
                spans.push((kind, start, i - 1));
            }
            continue;
        }
        let kind = (t - 1) / 2;
        let begins = t % 2 == 1;
        match open {
            Some((open_kind, _)) if !begins && open_kind == kind => {}
            _ => {
                if let Some((prev_kind, start)) = open.take() {
                    spans.push((prev_kind, start, i - 1));
                }
                open = Some((kind, i));
            }
        }
    }
    if let Some((kind, start)) = open {
        spans.push((kind, start, tags.len() - 1));
    }
    Ok(spans)
}

/// Entity-level exact-match F1 over BIO tag sequences: a predicted span
/// counts only if its type and both boundaries match a gold span.
pub fn span_f1(predictions: &[Vec<usize>], gold: &[Vec<usize>], classes: usize) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    let mut tp = 0;
    let mut n_predicted = 0;
    let mut n_gold = 0;
    for (row, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(TfsError::Metric(format!(
                "sentence {row}: {} predicted tags against {} gold tags",
                p.len(),
                g.len()
            )));
        }
        let predicted_spans = bio_spans(p, classes)?;
        let gold_spans: HashSet<Span> = bio_spans(g, classes)?.into_iter().collect();
        n_predicted += predicted_spans.len();
        n_gold += gold_spans.len();
        tp += predicted_spans.iter().filter(|s| gold_spans.contains(s)).count();
    }
    let fp = n_predicted - tp;
    let fn_ = n_gold - tp;
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Micro-averaged F1 over pooled (example, class) decisions.
pub fn micro_f1(predictions: &[Vec<usize>], gold: &[Vec<usize>], classes: usize) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    let as_set = |labels: &[usize], row: usize| -> Result<HashSet<usize>> {
        labels
            .iter()
            .map(|&l| {
                if l >= classes {
                    Err(TfsError::Metric(format!(
                        "example {row}: label {l} is out of range for {classes} classes"
                    )))
                } else {
                    Ok(l)
                }
            })
            .collect()
    };
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (row, (p, g)) in predictions.iter().zip(gold).enumerate() {
        let p = as_set(p, row)?;
        let g = as_set(g, row)?;
        tp += p.intersection(&g).count();
        fp += p.difference(&g).count();
        fn_ += g.difference(&p).count();
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Mean and population standard deviation across runs.
pub fn aggregate(regime: &str, metric: &str, per_run: &[f64]) -> Result<AggregateResult> {
    if per_run.is_empty() {
        return Err(TfsError::Metric(format!("no runs to aggregate for {regime}")));
    }
    if per_run.iter().any(|v| !v.is_finite()) {
        return Err(TfsError::Metric(format!("non-finite run value for {regime}")));
    }
    let n = per_run.len() as f64;
    let mean = per_run.iter().sum::<f64>() / n;
    let variance = per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(AggregateResult {
        regime: regime.to_string(),
        metric: metric.to_string(),
        mean,
        std: variance.sqrt(),
        per_run: per_run.to_vec(),
        gain_over_ft: None,
    })
}

/// Where a regime would land if the adaptation gain and the self-training
/// gain stacked exactly: FT plus both gains over FT.
pub fn additive_reference(
    ft: &AggregateResult,
    tapt: &AggregateResult,
    st: &AggregateResult,
) -> Result<f64> {
    if ft.metric != tapt.metric || ft.metric != st.metric {
        return Err(TfsError::Metric(format!(
            "additive reference over mismatched metrics {} / {} / {}",
            ft.metric, tapt.metric, st.metric
        )));
    }
    Ok(ft.mean + (tapt.mean - ft.mean) + (st.mean - ft.mean))
}
