//! Domain raster types.
//!
//! All rasters are `H x W x C` with row-major storage. `LinearHdrFrame` holds
//! non-negative linear radiance, `LdrFrame` a clipped camera-domain image in
//! `[0, 1]` tagged with its exposure, and `TonemappedFrame` a log-compressed
//! `[0, 1]` image used as the loss/metric domain. `FlowField` stores per-pixel
//! `(dx, dy)` displacements in pixels, positive meaning rightward/downward.

use ndarray::Array3;
use thiserror::Error;

use crate::scalar::Real;

/// Default camera gamma.
pub const DEFAULT_GAMMA: f64 = 2.2;
/// Default mu-law compression constant.
pub const DEFAULT_MU: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame must have {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("frame contains non-finite values")]
    NonFinite,
    #[error("{kind} values must lie in [{lo}, {hi}]; found {value}")]
    OutOfRange {
        kind: &'static str,
        lo: f64,
        hi: f64,
        value: f64,
    },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("frame is empty")]
    Empty,
    #[error("spatial dims mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
}

fn check_finite<T: Real>(data: &Array3<T>) -> Result<(), FrameError> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FrameError::NonFinite);
    }
    Ok(())
}

fn check_range<T: Real>(
    data: &Array3<T>,
    kind: &'static str,
    lo: f64,
    hi: f64,
) -> Result<(), FrameError> {
    for &v in data.iter() {
        let v = v.as_f64();
        if !(lo..=hi).contains(&v) {
            return Err(FrameError::OutOfRange {
                kind,
                lo,
                hi,
                value: v,
            });
        }
    }
    Ok(())
}

fn check_shape<T: Real>(data: &Array3<T>, channels: usize) -> Result<(), FrameError> {
    let (h, w, c) = data.dim();
    if c != channels {
        return Err(FrameError::ChannelCount {
            expected: channels,
            got: c,
        });
    }
    if h == 0 || w == 0 {
        return Err(FrameError::Empty);
    }
    Ok(())
}

/// Non-negative linear-radiance raster; the ground-truth and output domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHdrFrame<T: Real> {
    data: Array3<T>,
}

impl<T: Real> LinearHdrFrame<T> {
    pub fn new(data: Array3<T>) -> Result<Self, FrameError> {
        check_shape(&data, 3)?;
        check_finite(&data)?;
        if let Some(&v) = data.iter().find(|v| **v < T::zero()) {
            return Err(FrameError::OutOfRange {
                kind: "linear radiance",
                lo: 0.0,
                hi: f64::INFINITY,
                value: v.as_f64(),
            });
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }
}

/// Clipped `[0, 1]` camera-domain raster tagged with its exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrFrame<T: Real> {
    data: Array3<T>,
    exposure_time: T,
    exposure_index: usize,
    gamma: T,
}

impl<T: Real> LdrFrame<T> {
    pub fn new(
        data: Array3<T>,
        exposure_time: T,
        exposure_index: usize,
        gamma: T,
    ) -> Result<Self, FrameError> {
        check_shape(&data, 3)?;
        check_finite(&data)?;
        check_range(&data, "LDR", 0.0, 1.0)?;
        if exposure_time <= T::zero() {
            return Err(FrameError::NonPositive {
                name: "exposure_time",
                value: exposure_time.as_f64(),
            });
        }
        if gamma <= T::zero() {
            return Err(FrameError::NonPositive {
                name: "gamma",
                value: gamma.as_f64(),
            });
        }
        Ok(Self {
            data,
            exposure_time,
            exposure_index,
            gamma,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn exposure_time(&self) -> T {
        self.exposure_time
    }

    pub fn exposure_index(&self) -> usize {
        self.exposure_index
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    /// Replaces the pixel data, keeping exposure metadata. The new raster must
    /// satisfy the same invariants.
    pub fn with_data(&self, data: Array3<T>) -> Result<Self, FrameError> {
        Self::new(data, self.exposure_time, self.exposure_index, self.gamma)
    }
}

/// mu-law compressed `[0, 1]` raster; the loss/metric domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TonemappedFrame<T: Real> {
    data: Array3<T>,
    mu: T,
}

impl<T: Real> TonemappedFrame<T> {
    pub fn new(data: Array3<T>, mu: T) -> Result<Self, FrameError> {
        check_shape(&data, 3)?;
        check_finite(&data)?;
        check_range(&data, "tonemapped", 0.0, 1.0)?;
        if mu <= T::zero() {
            return Err(FrameError::NonPositive {
                name: "mu",
                value: mu.as_f64(),
            });
        }
        Ok(Self { data, mu })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn mu(&self) -> T {
        self.mu
    }
}

/// Per-pixel `(dx, dy)` displacement map, `H x W x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Real> {
    data: Array3<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(data: Array3<T>) -> Result<Self, FrameError> {
        check_shape(&data, 2)?;
        check_finite(&data)?;
        Ok(Self { data })
    }

    /// All-zero flow for the given dimensions.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 2)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    /// Mean displacement magnitude in pixels.
    pub fn mean_magnitude(&self) -> T {
        let (h, w, _) = self.data.dim();
        let mut acc = T::zero();
        for y in 0..h {
            for x in 0..w {
                let dx = self.data[[y, x, 0]];
                let dy = self.data[[y, x, 1]];
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
        acc / T::from_usize(h * w).unwrap()
    }
}
