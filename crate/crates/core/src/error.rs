use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// The federated protocol reached a state it must never reach.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid value for `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed message: {0}")]
    Wire(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn config(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}
