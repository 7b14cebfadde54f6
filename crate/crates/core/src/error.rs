use thiserror::Error;

use crate::lpfit::Side;

pub type Result<T> = std::result::Result<T, RdError>;

#[derive(Debug, Error)]
pub enum RdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{side} side: {msg}")]
    InsufficientData { side: Side, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl RdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RdError::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        RdError::Numerical(msg.into())
    }

    pub(crate) fn insufficient(side: Side, msg: impl Into<String>) -> Self {
        RdError::InsufficientData {
            side,
            msg: msg.into(),
        }
    }

    /// True for errors caused by the caller's input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            RdError::InvalidInput(_) | RdError::Io(_) | RdError::Csv(_)
        )
    }
}
