use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value is NaN or infinite where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A serialized artifact (checkpoint, dataset) failed to parse.
    #[error("load error in field `{field}`: {reason}")]
    Load { field: String, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn load(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
