//! Dynamic token masking.
//!
//! Each eligible position (a real text piece; never CLS, SEP, or PAD) is
//! masked independently with the configured probability, replaced by the
//! `[MASK]` id. Masks are drawn fresh on every call, so repeated visits to
//! the same example see different corruptions. A draw that selects nothing
//! is retried once and then forced to mask one random eligible position, so
//! a masked batch always has at least one target.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::MASK;
use crate::error::{Result, TfsError};
use crate::model::EncodedBatch;

/// A corrupted batch with its reconstruction targets.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    /// The batch with `[MASK]` written over the selected positions.
    pub batch: EncodedBatch,
    /// True where the indicator selected a position.
    pub mask_indicator: Vec<bool>,
    /// Uncorrupted ids for the whole batch.
    pub original: Vec<u32>,
}

impl MaskedBatch {
    /// Flat indices of masked positions, ascending.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.mask_indicator
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Original token ids at the masked positions, aligned with
    /// [`MaskedBatch::masked_positions`].
    pub fn targets(&self) -> Vec<usize> {
        self.masked_positions().iter().map(|&i| self.original[i] as usize).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_indicator.iter().filter(|&&m| m).count()
    }
}

pub fn apply_dynamic_mask(
    batch: &EncodedBatch,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(TfsError::Config(format!(
            "mask probability must be in (0, 1), got {mask_prob}"
        )));
    }
    let eligible: Vec<usize> = batch
        .maskable
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if eligible.is_empty() {
        return Err(TfsError::Data(
            "batch has no maskable positions (all sequences are empty)".into(),
        ));
    }

    let mut indicator = vec![false; batch.ids.len()];
    let mut selected = 0;
    for _attempt in 0..2 {
        for &pos in &eligible {
            let on = rng.gen::<f64>() < mask_prob;
            indicator[pos] = on;
            selected += on as usize;
        }
        if selected > 0 {
            break;
        }
    }
    if selected == 0 {
        indicator[eligible[rng.gen_range(0..eligible.len())]] = true;
    }

    let original = batch.ids.clone();
    let mut corrupted = batch.clone();
    for (pos, &on) in indicator.iter().enumerate() {
        if on {
            corrupted.ids[pos] = MASK;
        }
    }
    Ok(MaskedBatch { batch: corrupted, mask_indicator: indicator, original })
}
