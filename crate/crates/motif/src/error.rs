use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: input/config/format errors
/// exit with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (shape mismatches, empty batches,
    /// out-of-range indices, all-masked sequences, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Degenerate numerical input, e.g. a zero-norm embedding row.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid configuration (bad hyperparameters, head count not dividing C,
    /// unknown config keys).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset/checkpoint record; names the offending line and field.
    #[error("{path}:{line}: field `{field}`: {msg}")]
    Format {
        path: String,
        line: usize,
        field: String,
        msg: String,
    },

    /// Numerical failure (NaN/Inf loss, divergence).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Training diverged; carries the partial per-epoch report accumulated so far.
    #[error("numerical failure: training diverged: {msg}")]
    Diverged {
        msg: String,
        report: Box<crate::train::TrainReport>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable exit-code contract: 0 success, 2 input/config error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
