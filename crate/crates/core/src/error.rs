use thiserror::Error;

/// Failures raised by tensor kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("input error: {0}")]
    Input(String),
}

impl TensorError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        TensorError::Dimension(msg.into())
    }

    pub(crate) fn shapes(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Dimension(format!("{op}: incompatible shapes {lhs:?} and {rhs:?}"))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
