//! The three networks: per-exposure denoisers, the merge generator, and the
//! discriminator that scores tonemapped frame pairs.
//!
//! Each model owns its [`crate::params::ParamSet`] plus the layer handles
//! into it, and exposes two forward paths: a training forward that binds
//! parameters to a tape and reports persistent-state updates (batch-norm
//! running statistics, spectral-norm vectors), and a read-only inference path
//! on frame types.

mod denoiser;
mod discriminator;
mod generator;

pub use denoiser::{build_denoiser, denoiser_loss, DenoiserConfig, DenoiserModel};
pub use discriminator::{
    build_discriminator, DiscriminatorConfig, DiscriminatorModel, ScoreHead,
};
pub use generator::{build_generator, GeneratorConfig, GeneratorModel, GeneratorTrace};

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use hdrvid_core::Real;

use crate::error::NnError;

/// Whether a forward pass updates persistent state (running statistics,
/// power-iteration vectors) or runs frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Which half of the alternating exposure schedule a denoiser is trained
/// for. Frames carry their schedule index; the parity decides the role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureRole {
    Low,
    High,
}

impl ExposureRole {
    /// Role of the frame at the given schedule index: even slots are the low
    /// exposure, odd slots the high (the two-exposure schedule starts low).
    pub fn from_exposure_index(index: usize) -> Self {
        if index % 2 == 0 {
            Self::Low
        } else {
            Self::High
        }
    }

    pub fn matches_index(self, index: usize) -> bool {
        Self::from_exposure_index(index) == self
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::High => "high",
        }
    }
}

/// Stacks HWC frames into an NCHW batch.
pub(crate) fn hwc_to_nchw<T: Real>(frames: &[&Array3<T>]) -> ArrayD<T> {
    assert!(!frames.is_empty());
    let (h, w, c) = frames[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[frames.len(), c, h, w]));
    for (n, frame) in frames.iter().enumerate() {
        debug_assert_eq!(frame.dim(), (h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[n, ch, y, x]] = frame[[y, x, ch]];
                }
            }
        }
    }
    out
}

/// Extracts one sample of an NCHW batch as an HWC frame.
pub(crate) fn nchw_sample_to_hwc<T: Real>(batch: &ArrayD<T>, sample: usize) -> Array3<T> {
    let shape = batch.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = batch[[sample, ch, y, x]];
            }
        }
    }
    out
}

/// Bottom/right reflect padding needed to make `(h, w)` divisible by
/// `multiple`. Errors when a pad would reach the frame size, which reflect
/// padding cannot express — the frame is simply too small for the network
/// depth.
pub(crate) fn pad_to_multiple(
    h: usize,
    w: usize,
    multiple: usize,
) -> Result<(usize, usize), NnError> {
    let pad_h = (multiple - h % multiple) % multiple;
    let pad_w = (multiple - w % multiple) % multiple;
    if pad_h >= h || pad_w >= w {
        return Err(NnError::Config(format!(
            "{h}x{w} input too small to pad to a multiple of {multiple}"
        )));
    }
    Ok((pad_h, pad_w))
}
