//! Scalar abstraction: all raster math is generic over `f32`/`f64`.
//!
//! Production paths run in `f32`; oracles and gradient checks instantiate the
//! same code in `f64`.

use std::fmt::{Debug, Display};

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable in rasters, losses and network math.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + std::iter::Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in file formats.
    const DTYPE: &'static str;

    /// Converts an `f64` literal; panics on values unrepresentable as `Self`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal not representable")
    }

    /// Lossless widening for accumulation and digests.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}
