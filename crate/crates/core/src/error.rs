//! Crate-wide error type. CLI exit codes are derived from these variants:
//! configuration problems map to 1, runtime/numeric failures to 2, and
//! resumable partial federated results to 3.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("training error in expert {expert_id}: {msg}")]
    Training { expert_id: usize, msg: String },

    #[error("degenerate trajectory window: {0}")]
    DegenerateWindow(String),

    #[error("class coverage error: {0}")]
    ClassCoverage(String),

    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),

    #[error("corrupted component {component}: {msg}")]
    Corruption { component: String, msg: String },

    #[error("bundle format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(
        "distillation aborted at step {step} after sustained non-finite loss; \
         last good state is from step {last_good_step}"
    )]
    NumericAbort { step: usize, last_good_step: usize },

    #[error(
        "partial federated result: subtasks {completed:?} completed, \
         subtask {failed} failed: {msg} (re-run to resume)"
    )]
    PartialFederated {
        completed: Vec<usize>,
        failed: usize,
        msg: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Version { .. } => 1,
            Error::PartialFederated { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
