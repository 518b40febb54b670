use thiserror::Error;

/// Errors raised across the lab: tensor shape checks, configuration
/// validation, variant contracts and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("configuration error ({key}): {msg}")]
    Config { key: String, msg: String },

    #[error("variant shape error: {0}")]
    VariantShape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
