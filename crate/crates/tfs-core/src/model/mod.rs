//! Small post-layer-norm transformer encoder with task heads.
//!
//! The encoder is deliberately tiny: learned token + position embeddings
//! with a shared layer norm, then per layer multi-head self-attention and a
//! gelu feed-forward block, each followed by residual add and layer norm.
//! Position 0 of every sequence is `[CLS]`; classification heads read its
//! vector. The masked-token head ties its projection to the token embedding
//! matrix and adds a separate bias. Dropout applies to hidden states (after
//! the embedding norm and before each residual add), not to attention
//! weights.
//!
//! Parameters live in an insertion-ordered name -> tensor map; the order is
//! also the serialization order of the checkpoint format. Checkpoints hold
//! values already rounded to f32 so the on-disk format round-trips
//! bit-exactly; training widens them back into f64 working tensors.

pub mod checkpoint;
pub mod encoder;
pub mod init;

pub use checkpoint::{ModelCheckpoint, FORMAT_VERSION};
pub use encoder::{
    encode, head_forward, stage_model, stage_named, EncodeOutput, EncodedBatch, ParamNodes,
};
pub use init::{init_head_params, init_model};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{TaskFamily, TaskKind};
use crate::error::{Result, TfsError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Token table size; 0 means "fill in from the vocabulary later".
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            ff_size: 128,
            max_positions: 64,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self { vocab_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden_size == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ff_size == 0
            || self.max_positions == 0
        {
            return Err(TfsError::Config(format!(
                "encoder dimensions must all be positive: {self:?}"
            )));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(TfsError::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TfsError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// True when two configs describe the same parameter shapes. Dropout is
    /// a training-time knob, not part of the architecture.
    pub fn same_architecture(&self, other: &EncoderConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.hidden_size == other.hidden_size
            && self.num_layers == other.num_layers
            && self.num_heads == other.num_heads
            && self.ff_size == other.ff_size
            && self.max_positions == other.max_positions
    }
}

/// A task head the encoder can carry. `classes` is the output size; the
/// masked-token head projects to the vocabulary via the tied embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Mlm,
    Classifier { classes: usize },
    Tagger { classes: usize },
    MultiLabel { classes: usize },
}

impl HeadKind {
    pub fn for_task(task: &TaskKind) -> Self {
        match task.family {
            TaskFamily::SingleSentenceClassification | TaskFamily::PairClassification => {
                HeadKind::Classifier { classes: task.classes }
            }
            TaskFamily::TokenTagging => HeadKind::Tagger { classes: task.classes },
            TaskFamily::MultiLabelClassification => HeadKind::MultiLabel { classes: task.classes },
        }
    }

    /// Parameter-name prefix for this head.
    pub fn prefix(&self) -> &'static str {
        match self {
            HeadKind::Mlm => "head.mlm",
            HeadKind::Classifier { .. } => "head.classifier",
            HeadKind::Tagger { .. } => "head.tagger",
            HeadKind::MultiLabel { .. } => "head.multi",
        }
    }
}

/// Ordered (name, shape) list of encoder parameters for a config.
pub(crate) fn encoder_param_specs(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let i = config.hidden_size;
    let f = config.ff_size;
    let mut specs = vec![
        ("embeddings.token".to_string(), vec![config.vocab_size, i]),
        ("embeddings.position".to_string(), vec![config.max_positions, i]),
        ("embeddings.norm.gain".to_string(), vec![i]),
        ("embeddings.norm.bias".to_string(), vec![i]),
    ];
    for l in 0..config.num_layers {
        let p = format!("layers.{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{p}.attn.{name}"), vec![i, i]));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{p}.attn.{name}"), vec![i]));
        }
        specs.push((format!("{p}.attn.norm.gain"), vec![i]));
        specs.push((format!("{p}.attn.norm.bias"), vec![i]));
        specs.push((format!("{p}.ffn.w1"), vec![f, i]));
        specs.push((format!("{p}.ffn.b1"), vec![f]));
        specs.push((format!("{p}.ffn.w2"), vec![i, f]));
        specs.push((format!("{p}.ffn.b2"), vec![i]));
        specs.push((format!("{p}.ffn.norm.gain"), vec![i]));
        specs.push((format!("{p}.ffn.norm.bias"), vec![i]));
    }
    specs
}

/// Ordered (name, shape) list for one head. The masked-token head owns only
/// a bias; its projection weight is the token embedding matrix.
pub(crate) fn head_param_specs(
    config: &EncoderConfig,
    kind: HeadKind,
) -> Vec<(String, Vec<usize>)> {
    let i = config.hidden_size;
    let p = kind.prefix();
    match kind {
        HeadKind::Mlm => vec![(format!("{p}.bias"), vec![config.vocab_size])],
        HeadKind::Classifier { classes }
        | HeadKind::Tagger { classes }
        | HeadKind::MultiLabel { classes } => {
            vec![(format!("{p}.w"), vec![classes, i]), (format!("{p}.b"), vec![classes])]
        }
    }
}

/// Mutable working form of a checkpoint: full-precision tensors keyed by
/// name. Conversions to and from [`ModelCheckpoint`] round values to f32.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: IndexMap<String, Tensor>,
}

impl Model {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Self {
        Self { config: ckpt.config, params: ckpt.params.clone() }
    }

    /// True when every parameter of `kind` is present with matching shape.
    pub fn has_head(&self, kind: HeadKind) -> bool {
        head_param_specs(&self.config, kind)
            .iter()
            .all(|(name, shape)| self.params.get(name).map(Tensor::shape) == Some(&shape[..]))
    }

    /// Attach freshly initialized parameters for `kind` unless the head is
    /// already present. Returns whether anything was attached.
    pub fn ensure_head(&mut self, kind: HeadKind, seed: u64) -> Result<bool> {
        if self.has_head(kind) {
            return Ok(false);
        }
        for (name, tensor) in init::init_head_params(&self.config, kind, seed)? {
            self.params.insert(name, tensor);
        }
        Ok(true)
    }

    /// Splits into parallel name/tensor vectors for an optimizer loop.
    pub fn into_parts(self) -> (EncoderConfig, Vec<String>, Vec<Tensor>) {
        let (names, tensors) = self.params.into_iter().unzip();
        (self.config, names, tensors)
    }

    pub fn from_parts(config: EncoderConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        debug_assert_eq!(names.len(), tensors.len());
        Self { config, params: names.into_iter().zip(tensors).collect() }
    }
}
