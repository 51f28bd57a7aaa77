use std::io;

use thiserror::Error;

use crate::train::MetricRecord;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] splm_autodiff::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("non-finite training loss at step {}", .0.step)]
    NonFiniteLoss(Box<MetricRecord>),
    #[error("not comparable: {0}")]
    NotComparable(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
