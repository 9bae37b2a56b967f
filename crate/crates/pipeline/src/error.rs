//! Error type shared by the orchestration layer.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse config {path}: {message}")]
    ParseConfig { path: PathBuf, message: String },

    #[error("no {0} data: the manifest's {0} split is empty")]
    EmptySplit(&'static str),

    #[error("missing {what}: {path} (run the producing command first)")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
    },

    #[error(
        "non-finite {term} ({value}) at {stage} step {step}; \
         diagnostic snapshot written to {snapshot}"
    )]
    NonFiniteLoss {
        stage: String,
        step: u64,
        term: String,
        value: f64,
        snapshot: PathBuf,
    },

    #[error(
        "checkpoint was trained under config hash {stored} but the current \
         config hashes to {requested}; resume with the original config or \
         start a fresh run"
    )]
    ConfigHashMismatch { stored: String, requested: String },

    #[error(transparent)]
    Nn(#[from] hdrvid_nn::NnError),
    #[error(transparent)]
    Data(#[from] hdrvid_core::dataio::DataError),
    #[error(transparent)]
    Flow(#[from] hdrvid_core::flow::FlowError),
    #[error(transparent)]
    Metrics(#[from] hdrvid_core::metrics::MetricsError),
    #[error(transparent)]
    Img(#[from] hdrvid_core::imgio::ImgIoError),
    #[error(transparent)]
    Frame(#[from] hdrvid_core::frame::FrameError),
    #[error(transparent)]
    Radiometry(#[from] hdrvid_core::radiometry::RadiometryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
