use thiserror::Error;

/// Errors surfaced by fallible operations across the crate.
///
/// Shape mismatches inside the tensor engine are programming errors and
/// panic with a message naming both shapes; this enum covers conditions
/// that depend on runtime data or external input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate row {row}: no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("index out of range: {what} = {value}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("position {position} outside embedding table of {table_len} rows (absolute positional embedding does not extrapolate)")]
    Extrapolation { position: usize, table_len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
