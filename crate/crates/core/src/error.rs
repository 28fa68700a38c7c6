use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("position {position} outside the model window [1, {max_positions}]")]
    PositionOverflow { position: usize, max_positions: usize },

    #[error("context window overflow: {needed} positions needed, window holds {max_positions}")]
    WindowOverflow { needed: usize, max_positions: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("token id {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("attention row {row} has no valid key")]
    NoValidKey { row: usize },

    #[error("self cache belongs to layer {found}, expected layer {expected}")]
    CacheLayerMismatch { expected: usize, found: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("bad weight file magic")]
    BadMagic,

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file truncated")]
    Truncated,

    #[error("tensor `{tensor}` has shape {found:?}, header implies {expected:?}")]
    TensorSize { tensor: String, expected: (usize, usize), found: (usize, usize) },

    #[error("template `{template}`: missing field `{field}`")]
    MissingField { template: String, field: String },

    #[error("template `{template}`: unknown label id {label}")]
    UnknownLabel { template: String, label: u64 },

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("cannot split {demos} demonstrations into {groups} groups")]
    BadGroupCount { demos: usize, groups: usize },

    #[error("demonstration {index} has {tokens} tokens, exceeding the group budget of {budget}")]
    OversizedDemonstration { index: usize, tokens: usize, budget: usize },

    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),

    #[error("bad record on line {line}: {message}")]
    BadRecord { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}
