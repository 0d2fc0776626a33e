use std::path::PathBuf;

use thiserror::Error;

/// Errors across the synth/model/steering/eval pipeline.
#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Nn(#[from] steerlab_nn::NnError),

    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json error at {path}: {detail}")]
    Json { path: PathBuf, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate steering direction at layer {layer}, step {step}: difference norm {norm:e} below 1e-8")]
    DegenerateDirection { layer: usize, step: usize, norm: f32 },

    #[error("oracle validation accuracy {accuracy:.4} below required floor {floor:.4}")]
    OracleBelowFloor { accuracy: f32, floor: f32 },

    #[error("vector bank does not cover the steering config: {0}")]
    BankMismatch(String),

    #[error("hook site out of range: {0}")]
    HookSite(String),

    #[error("checkpoint at {0} is not marked trained")]
    NotTrained(PathBuf),

    #[error("{0}")]
    Invalid(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        LabError::Json { path: path.into(), detail: err.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
