//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; the message names the operation and both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed binary input; `offset` is the byte position of the defect.
    #[error("parse error at offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// Audio container or sample format we do not ingest.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),

    /// Per-line dataset validation failure (1-based line number).
    #[error("dataset line {line}: {msg}")]
    Data { line: usize, msg: String },

    /// A λ weight is positive but the corresponding feature stream is absent.
    #[error("missing modality: {0}")]
    MissingModality(String),

    /// Gradient turned NaN; names the offending parameter.
    #[error("NaN gradient in parameter {0}")]
    NanGrad(String),

    /// Training loss turned NaN at the given coordinates.
    #[error("NaN loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors a caller could have prevented by supplying valid
    /// inputs; the CLI maps these to exit code 1 and the rest to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Parse { .. }
                | Error::Format(_)
                | Error::Config(_)
                | Error::Data { .. }
                | Error::MissingModality(_)
        )
    }
}
