//! Core domain layer for alternating-exposure HDR video reconstruction:
//! frame types, radiometric transforms, dataset synthesis, optical-flow
//! alignment, and evaluation metrics.
//!
//! Everything raster-valued is generic over the working scalar through
//! [`scalar::Real`]; the aliases below fix the two supported precisions.
//! `f32` is the production raster type, `f64` backs oracle tests and
//! gradient checks.

pub mod dataio;
pub mod flow;
pub mod frame;
pub mod imgio;
pub mod metrics;
pub mod radiometry;
pub mod scalar;
pub mod seeding;

pub use frame::{FlowField, FrameError, LdrFrame, LinearHdrFrame, TonemappedFrame};
pub use scalar::Real;

/// Production-precision frame aliases.
pub type LinearHdrFrame32 = frame::LinearHdrFrame<f32>;
pub type LdrFrame32 = frame::LdrFrame<f32>;
pub type TonemappedFrame32 = frame::TonemappedFrame<f32>;
pub type FlowField32 = frame::FlowField<f32>;

/// Double-precision frame aliases for verification work.
pub type LinearHdrFrame64 = frame::LinearHdrFrame<f64>;
pub type LdrFrame64 = frame::LdrFrame<f64>;
pub type TonemappedFrame64 = frame::TonemappedFrame<f64>;
pub type FlowField64 = frame::FlowField<f64>;
