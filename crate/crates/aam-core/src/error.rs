//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by core operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes, named after the offending op.
    Shape { op: &'static str, detail: String },
    /// Domain violation in a numeric primitive (log of a non-positive
    /// value, non-finite input, NaN gradient).
    Numeric(String),
    /// A caller broke an operation's contract (empty batch, non-scalar
    /// backward root, invalid config).
    Contract(String),
    /// Prompt plus response does not fit the model context.
    Length { needed: usize, context: usize },
    /// Corpus generation could not satisfy its constraints.
    Generation(String),
    /// Evaluation corpus overlaps the training corpus.
    Contamination(String),
    /// Reports being compared do not share a corpus fingerprint.
    Comparability(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in `{op}`: {detail}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Length { needed, context } => {
                write!(f, "sequence length {needed} exceeds context {context}")
            }
            Error::Generation(msg) => write!(f, "corpus generation failed: {msg}"),
            Error::Contamination(msg) => write!(f, "contamination: {msg}"),
            Error::Comparability(msg) => write!(f, "reports not comparable: {msg}"),
        }
    }
}
