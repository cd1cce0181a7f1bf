use thiserror::Error;

use crate::network::TrainReport;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A series or intermediate value stopped being finite.
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence at epoch {epoch}, batch {batch}")]
    NumericDivergence {
        epoch: usize,
        batch: usize,
        partial: Option<Box<TrainReport>>,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// The operation was called with an unsupported combination of inputs.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("{other:?}")),
        }
    }
}
