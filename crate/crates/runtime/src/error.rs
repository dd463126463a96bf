use thiserror::Error;

use crate::wire::ErrorCode;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer reported {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("model digest mismatch: local {local}, peer {peer}")]
    ModelMismatch { local: String, peer: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("link closed: {0}")]
    Closed(String),
    #[error(transparent)]
    Core(#[from] fluidnn_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;
