use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter or layer configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A softmax row has no unmasked entry.
    #[error("degenerate mask: row {row} has no unmasked entry")]
    DegenerateMask { row: usize },

    /// Input data is inconsistent (duplicate ids, empty corpora, over-length items).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Training produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code for the command-line surface: 2 usage, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
