use thiserror::Error;

use crate::train::LossRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A loss became NaN or infinite; `trace` holds every completed epoch.
    #[error("non-finite loss at epoch {epoch} (stage {}): {}", .record.stage, .record.describe())]
    NonFiniteLoss {
        epoch: usize,
        record: LossRecord,
        trace: Vec<LossRecord>,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }
}
