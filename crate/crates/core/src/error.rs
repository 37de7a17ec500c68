use thiserror::Error;

use crate::comm::codec::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("secagg dropout: missing masked updates from clients {missing:?}")]
    SecaggDropout { missing: Vec<u32> },

    #[error("quorum not met in round {round}: received {received} of required {required}")]
    QuorumNotMet {
        round: u64,
        received: usize,
        required: usize,
    },

    #[error("hook `{event}` failed: {message}")]
    Hook { event: String, message: String },

    #[error("protocol error: {0}")]
    Decode(#[from] DecodeError),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("authentication rejected: {0}")]
    Auth(String),

    #[error("config digest mismatch: server {server}, local {local}")]
    ConfigMismatch { server: String, local: String },

    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("gave up after {attempts} attempts: {last}")]
    RetryExhausted { attempts: u32, last: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wire error code carried by an ERROR frame for this failure.
    pub fn wire_code(&self) -> u16 {
        match self {
            Error::Auth(_) => crate::comm::codec::ERR_AUTH,
            Error::Decode(_) | Error::Protocol(_) => crate::comm::codec::ERR_PROTOCOL,
            Error::SecaggDropout { .. } => crate::comm::codec::ERR_SECAGG_DROPOUT,
            Error::Remote { code, .. } => *code,
            _ => crate::comm::codec::ERR_INTERNAL,
        }
    }
}
