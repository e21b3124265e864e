//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by sequence, channel, and model operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("symbol {value} at position {pos} is outside the DNA alphabet")]
    InvalidSymbol { value: u8, pos: usize },

    #[error("DNA sequences must contain at least one base")]
    EmptySequence,

    #[error("profile event {value} at position {pos} is outside 0..=8")]
    InvalidProfileEvent { value: u8, pos: usize },

    #[error("profile consumes {consumed} positions but the sequence has {expected}")]
    ProfileLengthMismatch { consumed: usize, expected: usize },

    #[error("profile deletes the entire sequence")]
    EmptyChannelOutput,

    #[error("substitution type {0} is outside 1..=3")]
    InvalidSubstitutionType(u8),

    #[error("row {row} is not on the simplex: {reason}")]
    NotOnSimplex { row: usize, reason: String },

    #[error("sequence length {len} exceeds padded capacity {max}")]
    PadOverflow { len: usize, max: usize },

    #[error("padded rows are malformed: {0}")]
    BadPadding(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid channel spec: {0}")]
    InvalidSpec(String),

    #[error("unknown channel preset '{0}'")]
    UnknownPreset(String),

    #[error("unknown auxiliary pattern '{0}'")]
    UnknownPattern(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {metric} = {value}")]
    Diverged {
        step: usize,
        metric: &'static str,
        value: f64,
    },

    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
