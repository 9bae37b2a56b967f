//! Differentiable backward warping for the temporal consistency term.
//!
//! Matches the sampling convention of the flow module bit for bit: the output
//! at `(y, x)` bilinearly samples the input at `(y + dy, x + dx)` with edge
//! clamping, flow stored channel-last as `(dx, dy)`. The flow itself is a
//! constant (it comes from the alignment stage, which is not trained
//! end-to-end here); gradients flow into the warped frame only.

use ndarray::{Array4, ArrayD};

use hdrvid_core::Real;

use super::view4;
use crate::tape::{Tape, Var};

/// Warps `frame [N, C, H, W]` by `flow [N, H, W, 2]` (per-sample layout
/// identical to the flow field type's `(dx, dy)` planes).
pub fn warp_bilinear<T: Real>(tape: &Tape<T>, frame: Var, flow: &ArrayD<T>) -> Var {
    let fv = tape.value(frame);
    let f4 = view4(&fv);
    let (n, c, h, w) = f4.dim();
    assert_eq!(
        flow.shape(),
        [n, h, w, 2],
        "flow must be [N, H, W, 2] matching the frame grid"
    );

    // Corner indices and weights per output pixel, reused by the backward
    // scatter. Stored flat: (y0, x0, y1, x1, fy, fx).
    struct Sample {
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
        fy: f64,
        fx: f64,
    }
    let mut samples = Vec::with_capacity(n * h * w);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dx = flow[[s, y, x, 0]].as_f64();
                let dy = flow[[s, y, x, 1]].as_f64();
                let sx = (x as f64 + dx).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + dy).clamp(0.0, (h - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                samples.push(Sample {
                    y0,
                    x0,
                    y1,
                    x1,
                    fy: sy - y0 as f64,
                    fx: sx - x0 as f64,
                });
            }
        }
    }

    let mut out = Array4::<T>::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sm = &samples[(s * h + y) * w + x];
                    let (fy, fx) = (T::lit(sm.fy), T::lit(sm.fx));
                    let one = T::one();
                    let top = f4[[s, ch, sm.y0, sm.x0]] * (one - fx)
                        + f4[[s, ch, sm.y0, sm.x1]] * fx;
                    let bot = f4[[s, ch, sm.y1, sm.x0]] * (one - fx)
                        + f4[[s, ch, sm.y1, sm.x1]] * fx;
                    out[[s, ch, y, x]] = top * (one - fy) + bot * fy;
                }
            }
        }
    }

    tape.push(out.into_dyn(), move |grad, sink| {
        let g4 = view4(grad);
        let mut dframe = Array4::<T>::zeros((n, c, h, w));
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sm = &samples[(s * h + y) * w + x];
                        let g = g4[[s, ch, y, x]];
                        let (fy, fx) = (T::lit(sm.fy), T::lit(sm.fx));
                        let one = T::one();
                        dframe[[s, ch, sm.y0, sm.x0]] += g * (one - fy) * (one - fx);
                        dframe[[s, ch, sm.y0, sm.x1]] += g * (one - fy) * fx;
                        dframe[[s, ch, sm.y1, sm.x0]] += g * fy * (one - fx);
                        dframe[[s, ch, sm.y1, sm.x1]] += g * fy * fx;
                    }
                }
            }
        }
        sink.accumulate(frame, dframe.into_dyn());
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_unary_op;
    use crate::ops;
    use hdrvid_core::flow::warp_backward;
    use hdrvid_core::FlowField;
    use ndarray::{Array3, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_the_flow_module_warp() {
        // Same frame, same flow: the tape op and the plain warp must agree
        // exactly, otherwise the temporal loss would train against a
        // different operator than the alignment stage applies.
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let (h, w) = (7, 9);
        let hwc = Array3::<f64>::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0));
        let flow_data =
            Array3::<f64>::from_shape_fn((h, w, 2), |_| rng.random_range(-2.0..2.0));
        let flow = FlowField::new(flow_data.clone()).unwrap();
        let expected = warp_backward(&hwc, &flow).unwrap();

        // Repack HWC -> NCHW.
        let mut nchw = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    nchw[[0, ch, y, x]] = hwc[[y, x, ch]];
                }
            }
        }
        let mut flow_n = ArrayD::zeros(IxDyn(&[1, h, w, 2]));
        for y in 0..h {
            for x in 0..w {
                flow_n[[0, y, x, 0]] = flow_data[[y, x, 0]];
                flow_n[[0, y, x, 1]] = flow_data[[y, x, 1]];
            }
        }

        let tape = Tape::<f64>::new();
        let fv = tape.leaf(nchw);
        let warped = warp_bilinear(&tape, fv, &flow_n);
        let got = tape.value(warped);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let d = (got[[0, ch, y, x]] - expected[[y, x, ch]]).abs();
                    assert!(d < 1e-12, "mismatch at ({y},{x},{ch}): {d}");
                }
            }
        }
    }

    #[test]
    fn zero_flow_is_identity_with_identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.random_range(0.0..1.0));
        let flow = ArrayD::zeros(IxDyn(&[1, 4, 4, 2]));
        let tape = Tape::<f64>::new();
        let fv = tape.leaf(x.clone());
        let y = warp_bilinear(&tape, fv, &flow);
        assert_eq!(&*tape.value(y), &x);
        let loss = ops::sum_all(&tape, y);
        let grads = tape.backward(loss);
        assert!(grads.wrt(fv).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 5, 5]), |_| rng.random_range(0.0..1.0));
        let flow =
            ArrayD::from_shape_fn(IxDyn(&[1, 5, 5, 2]), |_| rng.random_range(-1.3..1.3));
        check_unary_op(&x, 1e-3, |tape, v| {
            let y = warp_bilinear(tape, v, &flow);
            ops::mean_all(tape, ops::square(tape, y))
        });
    }
}
