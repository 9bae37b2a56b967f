//! Networks, losses, and the training machinery behind the HDR-video merge.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tape`]) over
//! `ndarray` tensors, generic over the same scalar abstraction as the rest of
//! the workspace. The [`models`] module holds the three networks (per-exposure
//! denoiser, merge generator, discriminator); [`losses`] the composite
//! training objective; [`checkpoint`] the on-disk state format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod ops;
pub mod params;
pub mod tape;

pub use error::NnError;
pub use tape::{Gradients, Tape, Var};
