//! Optical-flow alignment of alternating-exposure neighbors.
//!
//! Frames at different exposures cannot be matched photometrically, so
//! alignment runs in three steps: [`exposure_normalize`] re-exposes both
//! frames at the reference exposure time, a [`FlowBackend`] estimates dense
//! flow on the normalized pair, and [`warp_backward`] pulls the *original*
//! neighbor LDR onto the reference grid, preserving its exposure for the
//! downstream merge network.
//!
//! Flow sign convention, used everywhere including the dump format: the field
//! stores sampling offsets, `warped(y, x) = neighbor(y + dy, x + dx)`, with
//! positive `dx` pointing right and positive `dy` pointing down.

mod lk;
mod warp;

pub use lk::PyramidalLucasKanade;
pub use warp::warp_backward;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use thiserror::Error;

use crate::frame::{FlowField, FrameError, LdrFrame};
use crate::radiometry::{linearize_ldr, simulate_ldr_indexed, RadiometryError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("spatial dims {found:?} do not match {expected:?}")]
    DimMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("exposure normalization requires differing exposure times, both are {0}")]
    SameExposure(f64),
    #[error("flow dump has bad magic {0:?}, expected {MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("flow dump declares unknown sign convention tag {0}")]
    UnknownSignConvention(u8),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense flow estimation between two same-size rasters.
///
/// Implementations must return a field with the input spatial dims. The
/// default backend is the classical [`PyramidalLucasKanade`]; a learned,
/// trainable backend can slot in behind the same interface.
pub trait FlowBackend<T: Real> {
    /// Estimates flow such that sampling `neighbor` at `(x + dx, y + dy)`
    /// approximates `reference` at `(x, y)`.
    fn estimate(
        &self,
        reference: &Array3<T>,
        neighbor: &Array3<T>,
    ) -> Result<FlowField<T>, FlowError>;

    /// Whether the backend carries state that training may update.
    fn trainable(&self) -> bool;

    /// Human-readable backend identifier for logs and reports.
    fn name(&self) -> &'static str;
}

/// Re-exposes both frames at the reference exposure time so they are
/// photometrically comparable on unclipped regions.
///
/// Both frames pass through `linearize -> simulate` at `t_ref`; the reference
/// makes the round trip too so that clipping is applied consistently.
pub fn exposure_normalize<T: Real>(
    reference: &LdrFrame<T>,
    neighbor: &LdrFrame<T>,
) -> Result<(Array3<T>, Array3<T>), FlowError> {
    if reference.exposure_time() == neighbor.exposure_time() {
        return Err(FlowError::SameExposure(reference.exposure_time().as_f64()));
    }
    if (reference.height(), reference.width()) != (neighbor.height(), neighbor.width()) {
        return Err(FlowError::DimMismatch {
            expected: (reference.height(), reference.width()),
            found: (neighbor.height(), neighbor.width()),
        });
    }
    let t_ref = reference.exposure_time();
    let renorm = |frame: &LdrFrame<T>| -> Result<Array3<T>, FlowError> {
        let linear = linearize_ldr(frame);
        let ldr = simulate_ldr_indexed(&linear, t_ref, frame.exposure_index(), frame.gamma())?;
        Ok(ldr.into_data())
    };
    Ok((renorm(reference)?, renorm(neighbor)?))
}

/// Estimates flow through `backend` after checking the dim contract.
pub fn estimate_flow<T: Real>(
    backend: &dyn FlowBackend<T>,
    reference: &Array3<T>,
    neighbor: &Array3<T>,
) -> Result<FlowField<T>, FlowError> {
    let (h, w, _) = reference.dim();
    let (nh, nw, _) = neighbor.dim();
    if (h, w) != (nh, nw) {
        return Err(FlowError::DimMismatch {
            expected: (h, w),
            found: (nh, nw),
        });
    }
    let flow = backend.estimate(reference, neighbor)?;
    if (flow.height(), flow.width()) != (h, w) {
        return Err(FlowError::DimMismatch {
            expected: (h, w),
            found: (flow.height(), flow.width()),
        });
    }
    Ok(flow)
}

/// Full alignment: exposure-normalize, estimate flow, backward-warp the
/// original neighbor. Returns the aligned neighbor at its own exposure along
/// with the flow field, which downstream losses reuse for temporal warping.
pub fn align_neighbor_with_flow<T: Real>(
    backend: &dyn FlowBackend<T>,
    reference: &LdrFrame<T>,
    neighbor: &LdrFrame<T>,
) -> Result<(LdrFrame<T>, FlowField<T>), FlowError> {
    let (ref_norm, nbr_norm) = exposure_normalize(reference, neighbor)?;
    let flow = estimate_flow(backend, &ref_norm, &nbr_norm)?;
    let warped = warp_backward(neighbor.data(), &flow)?;
    Ok((neighbor.with_data(warped)?, flow))
}

/// [`align_neighbor_with_flow`] without the flow field.
pub fn align_neighbor<T: Real>(
    backend: &dyn FlowBackend<T>,
    reference: &LdrFrame<T>,
    neighbor: &LdrFrame<T>,
) -> Result<LdrFrame<T>, FlowError> {
    align_neighbor_with_flow(backend, reference, neighbor).map(|(aligned, _)| aligned)
}

const MAGIC: [u8; 4] = *b"HVF1";
/// Sign-convention tag stored in flow dumps: backward sampling offsets,
/// positive right/down. The only convention this toolkit writes.
pub const SIGN_BACKWARD_RIGHT_DOWN: u8 = 0;

/// Writes a flow field as a small binary raster for debugging visualization:
/// magic, u32 width, u32 height, sign-convention byte, then row-major
/// little-endian `f32` pairs `(dx, dy)`.
pub fn save_flow<T: Real>(path: &Path, flow: &FlowField<T>) -> Result<(), FlowError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&(flow.width() as u32).to_le_bytes())?;
    out.write_all(&(flow.height() as u32).to_le_bytes())?;
    out.write_all(&[SIGN_BACKWARD_RIGHT_DOWN])?;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            for c in 0..2 {
                let v = flow.data()[[y, x, c]].as_f64() as f32;
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a flow dump written by [`save_flow`].
pub fn load_flow<T: Real>(path: &Path) -> Result<FlowField<T>, FlowError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(FlowError::BadMagic(magic));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let w = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let h = u32::from_le_bytes(u32buf) as usize;
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    if tag[0] != SIGN_BACKWARD_RIGHT_DOWN {
        return Err(FlowError::UnknownSignConvention(tag[0]));
    }
    let mut data = Array3::<T>::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            for c in 0..2 {
                input.read_exact(&mut u32buf)?;
                data[[y, x, c]] = T::lit(f32::from_le_bytes(u32buf) as f64);
            }
        }
    }
    Ok(FlowField::new(data)?)
}
