//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (bad sizes, fractions, thresholds...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Algorithm 1 ran out of candidates before reaching the requested
    /// codebook size.
    #[error("threshold infeasible: only {found} of {needed} sequences satisfy rho = {rho}")]
    ThresholdInfeasible { found: usize, needed: usize, rho: f64 },

    /// A diagnostic was refused because it would enumerate too many subsets.
    #[error("diagnostic too expensive: {0}")]
    TooExpensive(String),

    /// Tensor / vector shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    /// A model was asked to detect on a codebook it was not trained for.
    #[error("codebook hash mismatch: model trained for {expected}, got {actual}")]
    CodebookMismatch { expected: String, actual: String },

    /// File format violation while reading an artifact.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// A pipeline stage failed.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: config errors, infeasible codebooks and
    /// stage failures are distinguishable by the caller.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::ThresholdInfeasible { .. } => 4,
            Error::Stage { source, .. } => source.exit_code().max(3),
            _ => 3,
        }
    }
}
