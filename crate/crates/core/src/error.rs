use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("diverged during {stage}: {message}")]
    Divergence { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn divergence(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Divergence { stage: stage.into(), message: msg.into() }
    }
}
