use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at step {step} (lr = {lr:e}): non-finite loss")]
    Divergence { step: usize, lr: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable tag, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Unsupported(_) => "unsupported",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
