//! Orchestration: staged training, checkpoint-driven inference, ablation
//! runs, and procedural synthetic scenes for desk-scale experiments.

pub mod config;
pub mod error;
pub mod events;
pub mod prepare;
pub mod synth;

pub use config::TrainConfig;
pub use error::PipelineError;
