//! Building blocks for a desk-scale study of semi-supervised training
//! regimes on small transformer text encoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a reverse-mode autodiff tape over dense f64 tensors, an Adam
//!   optimizer, and a finite-difference gradient checker.
//! - [`data`]: subword vocabulary + greedy longest-match tokenizer, JSONL
//!   dataset loading for four task shapes, labeled/unlabeled splitting, and a
//!   synthetic corpus generator with a known Bayes rule.
//! - [`model`]: a small post-layer-norm transformer encoder with task heads
//!   and a directory checkpoint format (manifest + raw little-endian f32).
//! - [`objectives`]: dynamic token masking, masked-token prediction loss,
//!   supervised losses for the four task shapes, and the joint
//!   supervised + distillation objective used by self-training.
//! - [`metrics`]: accuracy, binary/span/micro F1, mean/std aggregation, and
//!   the additivity reference point used in reports.
//! - [`protocols`]: the training phases (continued pretraining, finetuning,
//!   pseudo-labeling, iterative self-training) and the five runnable regimes
//!   built from them.
//! - [`harness`]: the experiment matrix (ratios x splits x seeds x regimes),
//!   deterministic seed derivation, persistence, and report emission.
//!
//! Everything is deterministic given the configured seeds: reruns reproduce
//! metrics to full precision and checkpoints bit-for-bit. With the `parallel`
//! feature (default) the matmul kernels and the harness run matrix use rayon;
//! results are bit-identical to the sequential fallback because every output
//! element is computed by exactly one task in a fixed order.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod protocols;
pub mod seeding;
pub mod tensor;

pub use error::{Result, TfsError};
