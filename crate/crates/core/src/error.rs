//! Crate-wide error type.
//!
//! Errors split into two families: configuration errors (bad arguments,
//! malformed files, mismatched run setups) and numeric failures (non-finite
//! losses, diverged training). The CLI maps the families to distinct exit
//! codes, so `is_numeric` is part of the contract.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("parameter vectors use different segment tables")]
    SegmentTableMismatch,

    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),

    #[error("timestep {t} out of range for schedule with {t_steps} steps")]
    TimestepOutOfRange { t: usize, t_steps: usize },

    #[error("timestep ordering violated: t_prev = {t_prev} > t = {t}")]
    TimestepOrder { t: usize, t_prev: usize },

    #[error("{0} is empty")]
    EmptySet(&'static str),

    #[error("invalid {name}: {why}")]
    InvalidArgument { name: &'static str, why: String },

    #[error("validation split rounds to zero samples at timestep {timestep}")]
    ValidationSplitEmpty { timestep: usize },

    #[error("cannot form {groups} groups from {timesteps} collection timesteps")]
    GroupCount { groups: usize, timesteps: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{stage} diverged at iteration {iteration} (loss = {loss})")]
    Diverged {
        stage: String,
        iteration: usize,
        loss: f64,
    },

    #[error("artifact {path} is invalid: {why}")]
    BadArtifact { path: PathBuf, why: String },

    #[error("artifact {path} does not match the hash recorded in the manifest")]
    HashMismatch { path: PathBuf },

    #[error("runs differ in configuration keys: {}", keys.join(", "))]
    ConfigMismatch { keys: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the computation itself rather than of its setup.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }

    pub(crate) fn invalid(name: &'static str, why: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            why: why.into(),
        }
    }
}
