//! One error type for the whole crate.
//!
//! Variants map to the failure families surfaced by the public API; the CLI
//! maps them onto process exit codes (config -> 1, data-shaped errors -> 2,
//! everything else -> 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TfsError {
    /// Shape or size mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A vector meant to be a probability distribution is not one.
    #[error("distribution error: {0}")]
    Distribution(String),

    /// Optimizer state or gradients are inconsistent with the parameters.
    #[error("optimizer error: {0}")]
    Optimizer(String),

    /// An operation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file content, reported with its 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Well-formed input that violates a data contract (label range,
    /// tag/token length mismatch, empty set where one is required, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Model structure problems (missing head, id out of vocabulary range).
    #[error("model error: {0}")]
    Model(String),

    /// Loss construction on inputs that make the objective meaningless
    /// (zero masked positions, mismatched labeled/pseudo task shapes).
    #[error("objective error: {0}")]
    Objective(String),

    /// Checkpoint serialization problems (version/shape mismatch, truncated
    /// parameter payload).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training-protocol contract violations (empty unlabeled set, missing
    /// dev set, incompatible teacher/student configs).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Metric inputs that cannot be scored (length mismatch, empty input).
    #[error("metric error: {0}")]
    Metric(String),

    /// A failure inside one experiment run, wrapped with enough context to
    /// locate it in the run matrix. Exit-code mapping looks through to the
    /// source so a config error stays a config error.
    #[error("run {context}: {source}")]
    Run {
        context: String,
        source: Box<TfsError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TfsError>;
