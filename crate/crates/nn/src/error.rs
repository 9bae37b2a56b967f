//! Error type shared across the network stack.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{name}` already registered")]
    DuplicateParam { name: String },

    #[error(
        "denoiser for the {role} exposure cannot process a frame at schedule \
         index {index}; each denoiser is bound to one half of the alternating \
         schedule"
    )]
    RoleMismatch { role: &'static str, index: usize },

    #[error(
        "reference and neighbor share exposure time {0}; \
         merging needs one short and one long exposure"
    )]
    SameExposure(f64),

    #[error("checkpoint is not a {expected} checkpoint (found kind `{got}`)")]
    CheckpointKind { expected: String, got: String },

    #[error("checkpoint stores {got} tensors, model defines {expected}")]
    CheckpointTensorCount { expected: usize, got: usize },

    #[error("bad checkpoint magic (not an HVCK file)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error(
        "checkpoint dtype is `{stored}` but the model runs in `{requested}`; \
         resume with the dtype the run was started with"
    )]
    DtypeMismatch { stored: String, requested: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("frame error: {0}")]
    Frame(#[from] hdrvid_core::frame::FrameError),

    #[error("radiometry error: {0}")]
    Radiometry(#[from] hdrvid_core::radiometry::RadiometryError),

    #[error("flow error: {0}")]
    Flow(#[from] hdrvid_core::flow::FlowError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint header is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}
