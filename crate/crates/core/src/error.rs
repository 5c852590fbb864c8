use thiserror::Error;

use crate::scalar::Precision;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A size precondition was violated (e.g. `k > N`).
    #[error("size error: {0}")]
    Size(String),

    /// Malformed or inconsistent input data.
    #[error("input error: {0}")]
    Input(String),

    #[error("empty neighborhood: aggregation needs at least one neighbor")]
    EmptyNeighborhood,

    /// A cache or gradient was used with a layer it does not belong to.
    #[error("contract error: {0}")]
    Contract(String),

    /// A loss or intermediate became non-finite.
    #[error("numerical error at {coordinate}: {message}")]
    Numerical { coordinate: String, message: String },

    #[error("operation requires {required} precision, got {actual}")]
    Precision { required: Precision, actual: Precision },

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn size(msg: impl Into<String>) -> Self {
        Error::Size(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Convert a `serde_json` error into a [`Error::Parse`] with a byte offset into `text`.
    pub fn from_json(err: serde_json::Error, text: &str) -> Self {
        let offset = byte_offset(text, err.line(), err.column());
        Error::Parse {
            offset,
            message: err.to_string(),
        }
    }
}

/// Translate a 1-based (line, column) pair into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
