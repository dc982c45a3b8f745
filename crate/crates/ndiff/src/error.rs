use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric fault in {op}: non-finite value in output")]
    NumericFault { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index {index} out of range for vocabulary of size {size}")]
    Vocab { index: usize, size: usize },
    #[error("function is not deterministic: two forward passes disagree ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("attention row {row} has no unmasked key")]
    FullyMasked { row: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `std::io::Error` is neither `Clone` nor `PartialEq`; keep its rendered form.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("io: {0}")]
pub struct IoError(pub String);

impl From<std::io::Error> for NdError {
    fn from(e: std::io::Error) -> Self {
        NdError::Io(IoError(e.to_string()))
    }
}

pub type Result<T> = std::result::Result<T, NdError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NdError::Shape {
        op,
        detail: detail.into(),
    })
}
