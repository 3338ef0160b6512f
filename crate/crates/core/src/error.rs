use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unsupported op on gradient path: {0}")]
    UnsupportedOp(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
