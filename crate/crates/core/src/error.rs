use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("spec parse error at line {line}, column {column}: {message}")]
    SpecParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("spec invariant violated ({invariant}): {detail}")]
    Invariant {
        invariant: &'static str,
        detail: String,
    },

    #[error("invalid state transition at byte {offset}")]
    InvalidTransition { offset: u64 },

    #[error("input ends in non-accepting state {state}")]
    NonAcceptingEnd { state: String },

    #[error("record starting at byte {offset} exceeds the carry-over capacity of {capacity} bytes")]
    CarryOverOverflow { offset: u64, capacity: usize },

    #[error("tagging mode error: {0}")]
    Mode(String),

    #[error("column count validation failed: {0}")]
    Validation(String),

    #[error("cannot convert field (record {record}, column {column}) to {ty}: {excerpt:?}")]
    Conversion {
        record: u64,
        column: usize,
        ty: &'static str,
        excerpt: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("malformed container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invariant(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Invariant {
            invariant,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the data rather than by configuration or I/O.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidTransition { .. }
                | Error::NonAcceptingEnd { .. }
                | Error::CarryOverOverflow { .. }
                | Error::Mode(_)
                | Error::Validation(_)
                | Error::Conversion { .. }
        )
    }
}
