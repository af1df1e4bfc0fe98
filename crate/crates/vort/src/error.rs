use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("index {index} out of range [{lo}, {hi}]")]
    OutOfRange { index: usize, lo: usize, hi: usize },
    #[error("integration did not converge: estimate {value}, achieved tolerance {achieved:e}")]
    Integration { value: f64, achieved: f64 },
    #[error("certification failed at S={terms}: achieved error {achieved:e} > target {target:e}")]
    Certification { terms: usize, achieved: f64, target: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("optimizer did not converge: residual {residual:e}")]
    NoConvergence { residual: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
