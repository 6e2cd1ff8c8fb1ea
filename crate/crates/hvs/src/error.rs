use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HvsError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] hvs_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HvsError>;

pub(crate) fn format_err(msg: impl Into<String>) -> HvsError {
    HvsError::Format(msg.into())
}
