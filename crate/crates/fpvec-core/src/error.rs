//! Error type shared by every module in the crate.

use thiserror::Error;

use crate::tensor_store::CompatReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed checkpoint container or record file.
    #[error("parse error: {0}")]
    Parse(String),

    /// Element type not in the supported set.
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    /// NaN or infinity where a finite value is required; carries the tensor name.
    #[error("non-finite value in tensor '{0}'")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Structural mismatch between checkpoints; carries the full report.
    #[error("incompatible checkpoints: {0}")]
    Compat(CompatReport),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Training loss became NaN at the given optimizer step.
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: u64 },

    /// Fingerprint dataset generation could not satisfy its constraints.
    #[error("fingerprint generation failed: {0}")]
    Generation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A pipeline stage failed; wraps the underlying error with the stage
    /// name.
    #[error("stage '{stage}' failed: {source}")]
    Stage { stage: String, source: Box<Error> },
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's `--json-errors` output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) => "parse",
            Error::UnsupportedDtype(_) => "unsupported-dtype",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
            Error::Compat(_) => "compat",
            Error::Argument(_) => "argument",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Generation(_) => "generation",
            Error::Json(_) => "json",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(stage: impl Into<String>, source: Error) -> Error {
        Error::Stage { stage: stage.into(), source: Box::new(source) }
    }
}

/// Attach a stage label to a failing result.
pub fn stage<T>(label: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::in_stage(label, e))
}
