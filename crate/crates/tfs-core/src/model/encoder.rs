//! Batch encoding and the forward pass.
//!
//! A batch pads examples to the longest sequence in the batch (never to the
//! full position budget). PAD positions are excluded from attention by an
//! additive -1e9 bias on their key columns, which underflows to an exactly
//! zero attention weight after softmax; combined with losses that only read
//! real positions, PAD content can neither change real outputs nor receive
//! gradient.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, CLS, PAD, SEP};
use crate::error::{Result, TfsError};
use crate::model::{head_param_specs, EncoderConfig, HeadKind, Model};
use crate::tensor::graph::NEG_MASK;
use crate::tensor::{Graph, NodeId, Tensor};

/// Named parameter leaves staged into a graph.
pub type ParamNodes = IndexMap<String, NodeId>;

/// A padded batch in encoder input layout. All per-position vectors are flat
/// `[batch * seq_len]`, row-major.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// Token ids, PAD in the tail.
    pub ids: Vec<u32>,
    /// True for positions that belong to the example (CLS/SEP included).
    pub real: Vec<bool>,
    /// True for positions eligible for masking: real text pieces only.
    pub maskable: Vec<bool>,
    /// True at the first piece of each word of segment a (tagging targets).
    pub first_piece: Vec<bool>,
}

impl EncodedBatch {
    /// Lays out `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]` per example and
    /// pads to the batch maximum.
    pub fn build(examples: &[&Example], config: &EncoderConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(TfsError::Data("cannot encode an empty batch".into()));
        }
        let seq_len = examples.iter().map(|e| e.encoded_len()).max().expect("non-empty");
        if seq_len > config.max_positions {
            return Err(TfsError::Data(format!(
                "batch needs {seq_len} positions but the encoder allows {}",
                config.max_positions
            )));
        }
        let batch = examples.len();
        let mut out = Self {
            batch,
            seq_len,
            ids: vec![PAD; batch * seq_len],
            real: vec![false; batch * seq_len],
            maskable: vec![false; batch * seq_len],
            first_piece: vec![false; batch * seq_len],
        };
        for (row, example) in examples.iter().enumerate() {
            let mut at = row * seq_len;
            out.fill_slot(at, CLS, false);
            at += 1;
            for (i, &id) in example.segment_a.iter().enumerate() {
                out.fill_slot(at, id, true);
                if example.word_boundaries.get(i).copied().unwrap_or(false) {
                    out.first_piece[at] = true;
                }
                at += 1;
            }
            out.fill_slot(at, SEP, false);
            at += 1;
            if let Some(b) = &example.segment_b {
                for &id in b {
                    out.fill_slot(at, id, true);
                    at += 1;
                }
                out.fill_slot(at, SEP, false);
                at += 1;
            }
            debug_assert_eq!(at - row * seq_len, example.encoded_len());
        }
        for &id in &out.ids {
            if id as usize >= config.vocab_size {
                return Err(TfsError::Data(format!(
                    "token id {id} is out of range for vocabulary size {}",
                    config.vocab_size
                )));
            }
        }
        Ok(out)
    }

    fn fill_slot(&mut self, slot: usize, id: u32, maskable: bool) {
        self.ids[slot] = id;
        self.real[slot] = true;
        self.maskable[slot] = maskable;
    }

    /// Token ids as gather indices.
    pub fn token_rows(&self) -> Vec<usize> {
        self.ids.iter().map(|&id| id as usize).collect()
    }

    /// Position index of each flat slot.
    pub fn position_rows(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.seq_len).collect()
    }

    /// Flat index of the `[CLS]` slot of each example.
    pub fn cls_indices(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }

    /// Additive attention bias `[batch*heads, seq, seq]`: 0 on real key
    /// columns, -1e9 on PAD key columns.
    pub fn attention_bias(&self, heads: usize) -> Vec<f64> {
        let t = self.seq_len;
        let mut bias = Vec::with_capacity(self.batch * heads * t * t);
        for b in 0..self.batch {
            let row = &self.real[b * t..(b + 1) * t];
            for _ in 0..heads {
                for _q in 0..t {
                    bias.extend(row.iter().map(|&r| if r { 0.0 } else { NEG_MASK }));
                }
            }
        }
        bias
    }
}

/// Forward-pass handles: final hidden states `[batch*seq, hidden]` plus the
/// per-layer attention weight nodes `[batch*heads, seq, seq]`.
pub struct EncodeOutput {
    pub hidden: NodeId,
    pub attention: Vec<NodeId>,
}

/// Stages named tensors into a graph as leaves.
pub fn stage_named(
    graph: &mut Graph,
    names: &[String],
    tensors: &[Tensor],
    trainable: bool,
) -> Result<ParamNodes> {
    debug_assert_eq!(names.len(), tensors.len());
    names
        .iter()
        .zip(tensors)
        .map(|(name, t)| Ok((name.clone(), graph.from_tensor(t, trainable)?)))
        .collect()
}

/// Stages a model's parameter table into a graph.
pub fn stage_model(graph: &mut Graph, model: &Model, trainable: bool) -> Result<ParamNodes> {
    model
        .params
        .iter()
        .map(|(name, t)| Ok((name.clone(), graph.from_tensor(t, trainable)?)))
        .collect()
}

fn param(params: &ParamNodes, name: &str) -> Result<NodeId> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| TfsError::Model(format!("missing parameter {name}")))
}

/// Inverted dropout as a constant 0/(1/keep) mask; absent in eval mode.
fn maybe_dropout(
    graph: &mut Graph,
    x: NodeId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = graph.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> =
        (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = graph.constant(shape, mask)?;
    graph.mul(x, m)
}

/// Runs the encoder over a batch. `dropout_rng` carries training-mode
/// stochasticity; pass `None` for inference (dropout off).
pub fn encode(
    graph: &mut Graph,
    params: &ParamNodes,
    config: &EncoderConfig,
    batch: &EncodedBatch,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodeOutput> {
    config.validate()?;
    for &id in &batch.ids {
        if id as usize >= config.vocab_size {
            return Err(TfsError::Data(format!(
                "token id {id} is out of range for vocabulary size {}",
                config.vocab_size
            )));
        }
    }
    let (b, t, i, h) = (batch.batch, batch.seq_len, config.hidden_size, config.num_heads);
    let scale = 1.0 / (config.head_dim() as f64).sqrt();

    let tok = graph.gather_rows(param(params, "embeddings.token")?, batch.token_rows())?;
    let pos = graph.gather_rows(param(params, "embeddings.position")?, batch.position_rows())?;
    let sum = graph.add(tok, pos)?;
    let normed = graph.layer_norm(
        sum,
        param(params, "embeddings.norm.gain")?,
        param(params, "embeddings.norm.bias")?,
    )?;
    let mut x = maybe_dropout(graph, normed, config.dropout, &mut dropout_rng)?;

    let bias = graph.constant(vec![b * h, t, t], batch.attention_bias(h))?;
    let mut attention = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = |suffix: &str| param(params, &format!("layers.{l}.{suffix}"));

        let q = graph.linear(x, p("attn.wq")?, p("attn.bq")?)?;
        let k = graph.linear(x, p("attn.wk")?, p("attn.bk")?)?;
        let v = graph.linear(x, p("attn.wv")?, p("attn.bv")?)?;
        let split = |graph: &mut Graph, n: NodeId| -> Result<NodeId> {
            let three = graph.reshape(n, vec![b, t, i])?;
            graph.split_heads(three, h)
        };
        let (q, k, v) = (split(graph, q)?, split(graph, k)?, split(graph, v)?);
        let scores = graph.bmm_nt(q, k)?;
        let scaled = graph.scale(scores, scale)?;
        let masked = graph.add(scaled, bias)?;
        let attn = graph.softmax(masked, 2)?;
        attention.push(attn);
        let ctx = graph.bmm(attn, v)?;
        let merged = graph.merge_heads(ctx, h)?;
        let flat = graph.reshape(merged, vec![b * t, i])?;
        let proj = graph.linear(flat, p("attn.wo")?, p("attn.bo")?)?;
        let proj = maybe_dropout(graph, proj, config.dropout, &mut dropout_rng)?;
        let res = graph.add(x, proj)?;
        x = graph.layer_norm(res, p("attn.norm.gain")?, p("attn.norm.bias")?)?;

        let up = graph.linear(x, p("ffn.w1")?, p("ffn.b1")?)?;
        let act = graph.gelu(up)?;
        let down = graph.linear(act, p("ffn.w2")?, p("ffn.b2")?)?;
        let down = maybe_dropout(graph, down, config.dropout, &mut dropout_rng)?;
        let res = graph.add(x, down)?;
        x = graph.layer_norm(res, p("ffn.norm.gain")?, p("ffn.norm.bias")?)?;
    }
    Ok(EncodeOutput { hidden: x, attention })
}

/// Applies a head to encoder output, returning raw scores (no softmax):
/// `[batch, classes]` for sequence heads reading the `[CLS]` vector,
/// `[batch*seq, classes]` for the tagging head, `[batch*seq, vocab]` for the
/// masked-token head (projection tied to the token embedding).
pub fn head_forward(
    graph: &mut Graph,
    params: &ParamNodes,
    config: &EncoderConfig,
    kind: HeadKind,
    encoded: &EncodeOutput,
    batch: &EncodedBatch,
) -> Result<NodeId> {
    for (name, shape) in head_param_specs(config, kind) {
        let node = param(params, &name)
            .map_err(|_| TfsError::Model(format!("checkpoint has no {name} for {kind:?}")))?;
        if graph.shape(node) != shape {
            return Err(TfsError::Model(format!(
                "parameter {name} has shape {:?} but {kind:?} needs {shape:?}",
                graph.shape(node)
            )));
        }
    }
    let p = |suffix: &str| param(params, &format!("{}.{suffix}", kind.prefix()));
    match kind {
        HeadKind::Mlm => {
            let w = param(params, "embeddings.token")?;
            graph.linear(encoded.hidden, w, p("bias")?)
        }
        HeadKind::Tagger { .. } => graph.linear(encoded.hidden, p("w")?, p("b")?),
        HeadKind::Classifier { .. } | HeadKind::MultiLabel { .. } => {
            let cls = graph.gather_rows(encoded.hidden, batch.cls_indices())?;
            graph.linear(cls, p("w")?, p("b")?)
        }
    }
}
