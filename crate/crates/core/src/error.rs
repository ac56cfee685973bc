use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at `{layer}`: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value produced at `{layer}`")]
    NonFinite { layer: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("parameter set is frozen; refusing to mutate `{0}`")]
    Frozen(String),

    #[error("stale tape: recorded against parameter set {tape_id} v{tape_version}, got {id} v{version}")]
    StaleTape {
        tape_id: u64,
        tape_version: u64,
        id: u64,
        version: u64,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}; last good checkpoint is step {last_good_step}")]
    NonFiniteLoss { step: usize, last_good_step: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("corrupt file {path}: record {record}: {detail}")]
    Corrupt {
        path: PathBuf,
        record: usize,
        detail: String,
    },

    #[error("missing artifact {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("config hash mismatch: expected {expected}, found {found} in {path}")]
    HashMismatch {
        expected: String,
        found: String,
        path: PathBuf,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
