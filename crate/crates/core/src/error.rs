use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("timestamps not strictly increasing at row {row}")]
    NonMonotoneTimestamps { row: usize },
    #[error("channel `{channel}` is {pct:.1}% missing (limit 20%)")]
    TooMuchMissing { channel: String, pct: f64 },
    #[error("activity label `{0}` not in embedding table")]
    UnknownLabel(String),
    #[error("embedding table: {0}")]
    EmbeddingTable(String),
    #[error("channel `{0}` has zero variance on the training split")]
    DegenerateChannel(String),
    #[error("series too short: {len} steps, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match config: {0}")]
    ConfigMismatch(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence {
        epoch: usize,
        /// Last finite model, in checkpoint format.
        last_good: Vec<u8>,
    },
    #[error("metric undefined: {0}")]
    Metric(String),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Tensor(TensorError::NonFinite { .. })
            | Error::NonFiniteGradient(_)
            | Error::Divergence { .. } => ErrorCategory::Numeric,
            Error::Tensor(_)
            | Error::Config(_)
            | Error::UnknownVariant(_)
            | Error::ConfigMismatch(_)
            | Error::Scenario(_) => ErrorCategory::Config,
            _ => ErrorCategory::Data,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
