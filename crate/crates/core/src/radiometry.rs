//! Deterministic radiometric transforms.
//!
//! Exposure simulation and mu-law tonemapping follow
//!
//! ```text
//! L = clip((H * t)^(1/gamma))          simulate_ldr
//! H = L^gamma / t                      linearize_ldr (lower bound on clipped pixels)
//! T = log(1 + mu*H) / log(1 + mu)      tonemap, H normalized to [0, 1]
//! H = ((1 + mu)^T - 1) / mu            inverse_tonemap
//! ```
//!
//! Rasters are stored in the working scalar type; the per-pixel transcendental
//! math runs in `f64` so that forward/inverse pairs round-trip well below the
//! `1e-6` contract even for `f32` rasters.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::frame::{FrameError, LdrFrame, LinearHdrFrame, TonemappedFrame};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum RadiometryError {
    #[error("{name} must be positive, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("noise sigma range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")]
    InvalidSigmaRange { lo: f64, hi: f64 },
    #[error("tonemap input must be normalized to [0, 1]; found {0}")]
    Unnormalized(f64),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Gaussian perturbation parameters for synthetic sensor noise.
///
/// The per-frame standard deviation is drawn uniformly from `sigma_range`, so
/// a corpus synthesized with one spec covers a band of signal-to-noise ratios.
/// Everything is reproducible from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec<T: Real> {
    pub mean: T,
    pub sigma_range: [T; 2],
    pub seed: u64,
}

impl<T: Real> Default for NoiseSpec<T> {
    fn default() -> Self {
        Self {
            mean: T::zero(),
            sigma_range: [T::lit(0.01), T::lit(0.05)],
            seed: 0,
        }
    }
}

impl<T: Real> NoiseSpec<T> {
    pub fn validate(&self) -> Result<(), RadiometryError> {
        let [lo, hi] = self.sigma_range;
        if lo < T::zero() || hi < lo {
            return Err(RadiometryError::InvalidSigmaRange {
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        Ok(())
    }

    /// The same noise distribution with a different seed; used to derive
    /// per-frame streams from a corpus-level spec.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self {
            mean: self.mean,
            sigma_range: self.sigma_range,
            seed,
        }
    }
}

/// Simulates a camera exposure: `clip((H * t)^(1/gamma))` per pixel.
///
/// The result carries `exposure_index = 0`; dataset assembly re-tags frames
/// with their position in the alternation cycle.
pub fn simulate_ldr<T: Real>(
    hdr: &LinearHdrFrame<T>,
    exposure_time: T,
    gamma: T,
) -> Result<LdrFrame<T>, RadiometryError> {
    simulate_ldr_indexed(hdr, exposure_time, 0, gamma)
}

/// `simulate_ldr` with an explicit exposure index.
pub fn simulate_ldr_indexed<T: Real>(
    hdr: &LinearHdrFrame<T>,
    exposure_time: T,
    exposure_index: usize,
    gamma: T,
) -> Result<LdrFrame<T>, RadiometryError> {
    if exposure_time <= T::zero() {
        return Err(RadiometryError::InvalidParameter {
            name: "exposure_time",
            value: exposure_time.as_f64(),
        });
    }
    if gamma <= T::zero() {
        return Err(RadiometryError::InvalidParameter {
            name: "gamma",
            value: gamma.as_f64(),
        });
    }
    let t = exposure_time.as_f64();
    let inv_gamma = 1.0 / gamma.as_f64();
    let data = hdr.data().mapv(|h| {
        let v = (h.as_f64() * t).powf(inv_gamma);
        T::lit(v.clamp(0.0, 1.0))
    });
    Ok(LdrFrame::new(data, exposure_time, exposure_index, gamma)?)
}

/// Inverts the exposure simulation on unclipped pixels: `L^gamma / t`.
///
/// Pixels that saturated in `simulate_ldr` come back as `1/t`, a lower bound
/// on the true radiance rather than an inverse.
pub fn linearize_ldr<T: Real>(ldr: &LdrFrame<T>) -> LinearHdrFrame<T> {
    let t = ldr.exposure_time().as_f64();
    let gamma = ldr.gamma().as_f64();
    let data = ldr.data().mapv(|l| T::lit(l.as_f64().powf(gamma) / t));
    LinearHdrFrame::new(data).expect("linearized LDR is finite and non-negative")
}

/// Adds clipped i.i.d. Gaussian noise: `clip(L + n)` with `n ~ N(mean, sigma)`
/// and `sigma` drawn uniformly from the spec's range.
pub fn add_noise<T: Real>(
    ldr: &LdrFrame<T>,
    spec: &NoiseSpec<T>,
) -> Result<LdrFrame<T>, RadiometryError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = [spec.sigma_range[0].as_f64(), spec.sigma_range[1].as_f64()];
    let sigma = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let normal = Normal::new(spec.mean.as_f64(), sigma).expect("validated sigma");
    let data = ldr.data().mapv(|l| {
        let n = normal.sample(&mut rng);
        T::lit((l.as_f64() + n).clamp(0.0, 1.0))
    });
    Ok(ldr.with_data(data)?)
}

/// Normalizes linear radiance by a dataset scale and clips to `[0, 1]`,
/// producing the domain `tonemap` expects.
pub fn normalize_radiance<T: Real>(hdr: &LinearHdrFrame<T>, scale: T) -> Result<LinearHdrFrame<T>, RadiometryError> {
    if scale <= T::zero() {
        return Err(RadiometryError::InvalidParameter {
            name: "scale",
            value: scale.as_f64(),
        });
    }
    let s = scale.as_f64();
    let data = hdr.data().mapv(|h| T::lit((h.as_f64() / s).min(1.0)));
    Ok(LinearHdrFrame::new(data)?)
}

/// mu-law compression `T = log(1 + mu*H) / log(1 + mu)`.
///
/// Strictly increasing in `H` with fixed endpoints 0 and 1. Input must already
/// be normalized to `[0, 1]` (see [`normalize_radiance`]).
pub fn tonemap<T: Real>(
    hdr: &LinearHdrFrame<T>,
    mu: T,
) -> Result<TonemappedFrame<T>, RadiometryError> {
    if mu <= T::zero() {
        return Err(RadiometryError::InvalidParameter {
            name: "mu",
            value: mu.as_f64(),
        });
    }
    let mu64 = mu.as_f64();
    let denom = (1.0 + mu64).ln();
    let mut out = Array3::<T>::zeros(hdr.data().raw_dim());
    for (o, &h) in out.iter_mut().zip(hdr.data().iter()) {
        let h = h.as_f64();
        if h > 1.0 {
            return Err(RadiometryError::Unnormalized(h));
        }
        *o = T::lit(((1.0 + mu64 * h).ln() / denom).clamp(0.0, 1.0));
    }
    Ok(TonemappedFrame::new(out, mu)?)
}

/// mu-law expansion `H = ((1 + mu)^T - 1) / mu`, the algebraic inverse of
/// [`tonemap`] over `[0, 1]`.
pub fn inverse_tonemap<T: Real>(tm: &TonemappedFrame<T>) -> LinearHdrFrame<T> {
    let mu = tm.mu().as_f64();
    let base = 1.0 + mu;
    let data = tm
        .data()
        .mapv(|t| T::lit(((base.powf(t.as_f64()) - 1.0) / mu).max(0.0)));
    LinearHdrFrame::new(data).expect("inverse tonemap is non-negative and finite")
}
