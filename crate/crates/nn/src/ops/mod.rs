//! Differentiable operations over tape variables.
//!
//! Every op reads its inputs from the tape, computes the forward value
//! eagerly, and records a backward closure. Shape conventions: feature maps
//! are `[N, C, H, W]`, dense activations `[N, F]`, scalars `[1]`. Shape
//! violations are programming errors and panic; fallible user-facing
//! validation lives in the model layer.

mod conv;
mod gram;
mod linear;
mod norm;
mod pad;
mod pool;
mod warp;

pub use conv::{conv2d, conv_transpose2d};
pub use gram::{gram_batch, gram_matrix};
pub use linear::{dense, matmul, power_iteration_sigma, spectral_normalize};
pub use norm::{batchnorm2d, instancenorm2d, BatchNormMode};
pub use pad::{crop_spatial, pad_reflect};
pub use pool::{maxpool2, spatial_mean};
pub use warp::warp_bilinear;

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use hdrvid_core::Real;

use crate::tape::{Tape, Var};

fn assert_same_shape<T: Real>(context: &str, a: &ArrayD<T>, b: &ArrayD<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{context}: operand shapes {:?} vs {:?} differ",
        a.shape(),
        b.shape()
    );
}

/// Fixed-dimension view of an NCHW tensor.
pub(crate) fn view4<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view()
        .into_dimensionality()
        .expect("expected an NCHW tensor")
}

/// Fixed-dimension view of a matrix-shaped tensor.
pub(crate) fn view2<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality()
        .expect("expected a 2-D tensor")
}

/// Elementwise `a + b` (same shape).
pub fn add<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    assert_same_shape("add", &av, &bv);
    let out = &*av + &*bv;
    tape.push(out, move |grad, sink| {
        sink.accumulate(a, grad.clone());
        sink.accumulate(b, grad.clone());
    })
}

/// Elementwise `a - b` (same shape).
pub fn sub<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    assert_same_shape("sub", &av, &bv);
    let out = &*av - &*bv;
    tape.push(out, move |grad, sink| {
        sink.accumulate(a, grad.clone());
        sink.accumulate(b, grad.mapv(|g| -g));
    })
}

/// Elementwise `a * b` (same shape).
pub fn mul<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    assert_same_shape("mul", &av, &bv);
    let out = &*av * &*bv;
    tape.push(out, move |grad, sink| {
        sink.accumulate(a, grad * &*bv);
        sink.accumulate(b, grad * &*av);
    })
}

/// Affine map `scale * x + shift` with constant coefficients.
pub fn scale_add<T: Real>(tape: &Tape<T>, x: Var, scale: T, shift: T) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| v * scale + shift);
    tape.push(out, move |grad, sink| {
        sink.accumulate(x, grad.mapv(|g| g * scale));
    })
}

/// `scale * x`.
pub fn scale<T: Real>(tape: &Tape<T>, x: Var, factor: T) -> Var {
    scale_add(tape, x, factor, T::zero())
}

/// `1 - x`, used for the fake-score side of the discriminator loss.
pub fn one_minus<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    scale_add(tape, x, -T::one(), T::one())
}

/// Weighted sum of same-shaped variables: `Σ wᵢ · xᵢ`.
pub fn weighted_sum<T: Real>(tape: &Tape<T>, terms: &[(Var, T)]) -> Var {
    assert!(!terms.is_empty(), "weighted_sum needs at least one term");
    let first = tape.value(terms[0].0);
    let mut out = first.mapv(|v| v * terms[0].1);
    for &(var, weight) in &terms[1..] {
        let value = tape.value(var);
        assert_same_shape("weighted_sum", &first, &value);
        out.zip_mut_with(&value, |acc, &v| *acc += v * weight);
    }
    let terms: Vec<(Var, T)> = terms.to_vec();
    tape.push(out, move |grad, sink| {
        for &(var, weight) in &terms {
            sink.accumulate(var, grad.mapv(|g| g * weight));
        }
    })
}

/// Rectified linear unit.
pub fn relu<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| if v > T::zero() { v } else { T::zero() });
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| {
            if v <= T::zero() {
                *g = T::zero();
            }
        });
        sink.accumulate(x, dx);
    })
}

/// Leaky rectified linear unit with the given negative-side slope.
pub fn leaky_relu<T: Real>(tape: &Tape<T>, x: Var, slope: T) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| if v > T::zero() { v } else { v * slope });
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| {
            if v <= T::zero() {
                *g *= slope;
            }
        });
        sink.accumulate(x, dx);
    })
}

/// Logistic sigmoid, evaluated in f64 for stability at large magnitudes.
pub fn sigmoid<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = Rc::new(xv.mapv(|v| T::lit(1.0 / (1.0 + (-v.as_f64()).exp()))));
    let captured = Rc::clone(&out);
    tape.push_shared(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&captured, |g, &y| *g *= y * (T::one() - y));
        sink.accumulate(x, dx);
    })
}

/// Clamp to `[0, 1]`. The subgradient passes only strictly inside the range,
/// so saturated pixels stop receiving updates.
pub fn clamp01<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| v.max(T::zero()).min(T::one()));
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| {
            if v <= T::zero() || v >= T::one() {
                *g = T::zero();
            }
        });
        sink.accumulate(x, dx);
    })
}

/// `ln(max(x, floor))`: the log used by the adversarial terms, which must
/// stay finite when a score saturates at 0 or 1.
pub fn ln_clamped<T: Real>(tape: &Tape<T>, x: Var, floor: T) -> Var {
    assert!(floor > T::zero(), "ln_clamped floor must be positive");
    let xv = tape.value(x);
    let out = xv.mapv(|v| v.max(floor).ln());
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| {
            *g = if v > floor { *g / v } else { T::zero() };
        });
        sink.accumulate(x, dx);
    })
}

/// Elementwise square root with a guarded derivative: the forward value is
/// exact (so an all-zero input maps to exactly zero), while the backward
/// factor `1 / (2·sqrt(x))` is clamped to stay finite at the origin.
pub fn sqrt_guarded<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| v.max(T::zero()).sqrt());
    let half = T::lit(0.5);
    let eps = T::lit(1e-12);
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| {
            let root = v.max(T::zero()).sqrt();
            *g = *g * half / root.max(eps);
        });
        sink.accumulate(x, dx);
    })
}

/// Elementwise absolute value; subgradient 0 at the kink.
pub fn abs<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| v.abs());
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| {
            *g = if v > T::zero() {
                *g
            } else if v < T::zero() {
                -*g
            } else {
                T::zero()
            };
        });
        sink.accumulate(x, dx);
    })
}

/// Elementwise square.
pub fn square<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out = xv.mapv(|v| v * v);
    let two = T::lit(2.0);
    tape.push(out, move |grad, sink| {
        let mut dx = grad.clone();
        dx.zip_mut_with(&xv, |g, &v| *g = *g * two * v);
        sink.accumulate(x, dx);
    })
}

/// Mean over all elements, returned as a `[1]` scalar node.
pub fn mean_all<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let n = xv.len();
    assert!(n > 0, "mean_all of an empty tensor");
    let mean = xv.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
    let shape: Vec<usize> = xv.shape().to_vec();
    let inv_n = T::lit(1.0 / n as f64);
    let out = ArrayD::from_elem(IxDyn(&[1]), T::lit(mean));
    tape.push(out, move |grad, sink| {
        let g = grad[[0]] * inv_n;
        sink.accumulate(x, ArrayD::from_elem(IxDyn(&shape), g));
    })
}

/// Sum over all elements, returned as a `[1]` scalar node.
pub fn sum_all<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let total = xv.iter().map(|v| v.as_f64()).sum::<f64>();
    let shape: Vec<usize> = xv.shape().to_vec();
    let out = ArrayD::from_elem(IxDyn(&[1]), T::lit(total));
    tape.push(out, move |grad, sink| {
        let g = grad[[0]];
        sink.accumulate(x, ArrayD::from_elem(IxDyn(&shape), g));
    })
}

/// `x / s` where `s` is a positive `[1]` scalar node; both operands receive
/// gradient. Used by spectral normalization (`W / σ`).
pub fn div_by_scalar_var<T: Real>(tape: &Tape<T>, x: Var, s: Var) -> Var {
    let xv = tape.value(x);
    let sv = tape.value(s);
    assert_eq!(sv.len(), 1, "div_by_scalar_var divisor must be a scalar node");
    let denom = sv[[0]];
    let out = xv.mapv(|v| v / denom);
    tape.push(out, move |grad, sink| {
        sink.accumulate(x, grad.mapv(|g| g / denom));
        let mut ds = T::zero();
        for (g, v) in grad.iter().zip(xv.iter()) {
            ds += *g * *v;
        }
        ds = -ds / (denom * denom);
        sink.accumulate(s, ArrayD::from_elem(IxDyn(&[1]), ds));
    })
}

/// Identity in value, but gradients stop here. The discriminator trains on
/// detached generator output so its loss cannot push the generator.
pub fn detach<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let value = tape.value(x);
    tape.leaf((*value).clone())
}

/// Reshape preserving element count and order.
pub fn reshape<T: Real>(tape: &Tape<T>, x: Var, shape: &[usize]) -> Var {
    let xv = tape.value(x);
    let old_shape: Vec<usize> = xv.shape().to_vec();
    assert_eq!(
        xv.len(),
        shape.iter().product::<usize>(),
        "reshape must preserve element count"
    );
    let out = xv
        .to_shape(IxDyn(shape))
        .expect("contiguous reshape")
        .to_owned();
    tape.push(out, move |grad, sink| {
        let dx = grad
            .to_shape(IxDyn(&old_shape))
            .expect("contiguous reshape")
            .to_owned();
        sink.accumulate(x, dx);
    })
}

/// Concatenate `[N, C, H, W]` maps along the channel axis.
pub fn concat_channels<T: Real>(tape: &Tape<T>, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat_channels needs at least one input");
    let values: Vec<_> = parts.iter().map(|&v| tape.value(v)).collect();
    for v in &values {
        assert_eq!(v.ndim(), 4, "concat_channels expects NCHW tensors");
        assert_eq!(v.shape()[0], values[0].shape()[0], "batch sizes differ");
        assert_eq!(v.shape()[2], values[0].shape()[2], "heights differ");
        assert_eq!(v.shape()[3], values[0].shape()[3], "widths differ");
    }
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(1), &views)
        .expect("channel concatenation")
        .into_dyn();
    let channels: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
    let parts: Vec<Var> = parts.to_vec();
    tape.push(out, move |grad, sink| {
        let mut start = 0;
        for (&var, &c) in parts.iter().zip(&channels) {
            let slice = grad
                .slice_axis(Axis(1), ndarray::Slice::from(start..start + c))
                .to_owned();
            sink.accumulate(var, slice);
            start += c;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn leaf(tape: &Tape<f64>, data: &[f64]) -> Var {
        tape.leaf(arr1(data).into_dyn())
    }

    #[test]
    fn weighted_sum_routes_weights() {
        let tape = Tape::<f64>::new();
        let a = leaf(&tape, &[1.0, 2.0]);
        let b = leaf(&tape, &[10.0, 20.0]);
        let s = weighted_sum(&tape, &[(a, 2.0), (b, 0.5)]);
        let loss = sum_all(&tape, s);
        assert_eq!(tape.scalar(loss), 2.0 + 4.0 + 5.0 + 10.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(a).unwrap()[[0]], 2.0);
        assert_eq!(grads.wrt(b).unwrap()[[1]], 0.5);
    }

    #[test]
    fn sqrt_guarded_is_exact_at_zero_with_finite_gradient() {
        let tape = Tape::<f64>::new();
        let x = leaf(&tape, &[0.0]);
        let y = sqrt_guarded(&tape, x);
        assert_eq!(tape.scalar(y), 0.0);
        let grads = tape.backward(y);
        assert!(grads.wrt(x).unwrap()[[0]].is_finite());
    }

    #[test]
    fn ln_clamped_floors_and_zeroes_gradient_below_floor() {
        let tape = Tape::<f64>::new();
        let x = leaf(&tape, &[0.0, 0.5]);
        let y = ln_clamped(&tape, x, 1e-7);
        let yv = tape.value(y);
        assert!((yv[[0]] - (1e-7f64).ln()).abs() < 1e-12);
        assert!((yv[[1]] - 0.5f64.ln()).abs() < 1e-12);
        let loss = sum_all(&tape, y);
        let grads = tape.backward(loss);
        let dx = grads.wrt(x).unwrap();
        assert_eq!(dx[[0]], 0.0, "saturated score must not explode");
        assert!((dx[[1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clamp01_blocks_gradient_outside_range() {
        let tape = Tape::<f64>::new();
        let x = leaf(&tape, &[-0.5, 0.25, 1.5]);
        let y = clamp01(&tape, x);
        let yv = tape.value(y);
        assert_eq!(yv[[0]], 0.0);
        assert_eq!(yv[[1]], 0.25);
        assert_eq!(yv[[2]], 1.0);
        let loss = sum_all(&tape, y);
        let grads = tape.backward(loss);
        let dx = grads.wrt(x).unwrap();
        assert_eq!((dx[[0]], dx[[1]], dx[[2]]), (0.0, 1.0, 0.0));
    }

    #[test]
    fn detach_stops_gradient() {
        let tape = Tape::<f64>::new();
        let x = leaf(&tape, &[3.0]);
        let d = detach(&tape, x);
        let y = mul(&tape, d, d);
        let grads = tape.backward(y);
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn concat_channels_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0));
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 2.0));
        let c = concat_channels(&tape, &[a, b]);
        assert_eq!(tape.value(c).shape(), &[1, 3, 2, 2]);
        let loss = mean_all(&tape, c);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(a).unwrap().shape(), &[1, 2, 2, 2]);
        assert_eq!(grads.wrt(b).unwrap().shape(), &[1, 1, 2, 2]);
        let total: f64 = grads.wrt(a).unwrap().sum() + grads.wrt(b).unwrap().sum();
        assert!((total - 1.0).abs() < 1e-12, "mean gradient sums to one");
    }

    #[test]
    fn div_by_scalar_var_gradients() {
        // d(x/s)/ds = -x/s^2; with x=[6], s=2: out=3, ds=-1.5.
        let tape = Tape::<f64>::new();
        let x = leaf(&tape, &[6.0]);
        let s = leaf(&tape, &[2.0]);
        let y = div_by_scalar_var(&tape, x, s);
        assert_eq!(tape.scalar(y), 3.0);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(x).unwrap()[[0]], 0.5);
        assert_eq!(grads.wrt(s).unwrap()[[0]], -1.5);
    }
}
