use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("slot references input channel {channel} but the layer has {n_in} inputs")]
    SlotOutOfRange { channel: usize, n_in: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("target of {target} params is unreachable; the minimum viable network has {minimum}")]
    UnreachableBudget { target: u64, minimum: u64 },

    #[error("permutation: {0}")]
    Permutation(String),

    #[error("non-finite loss at step {step}; activation norms: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("{}: {msg} (byte offset {offset})", path.display())]
    Idx {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
