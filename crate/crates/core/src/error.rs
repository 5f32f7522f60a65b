use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
