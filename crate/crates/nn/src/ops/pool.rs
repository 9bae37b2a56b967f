//! Spatial pooling.

use ndarray::{Array2, Array4, Axis};

use hdrvid_core::Real;

use super::view4;
use crate::tape::{Tape, Var};

/// 2×2 max pooling with stride 2. Spatial dims must be even; the model layer
/// pads inputs up front so this never triggers mid-network.
pub fn maxpool2<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "maxpool2 requires even spatial dims, got {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    // Winner corner per output cell, encoded as dy*2+dx, replayed in backward.
    let mut winners = Array4::<u8>::zeros((n, c, oh, ow));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x4[[s, ch, 2 * oy, 2 * ox]];
                    let mut code = 0u8;
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let v = x4[[s, ch, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                code = (dy * 2 + dx) as u8;
                            }
                        }
                    }
                    out[[s, ch, oy, ox]] = best;
                    winners[[s, ch, oy, ox]] = code;
                }
            }
        }
    }
    tape.push(out.into_dyn(), move |grad, sink| {
        let g4 = view4(grad);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let code = winners[[s, ch, oy, ox]] as usize;
                        let (dy, dxo) = (code / 2, code % 2);
                        dx[[s, ch, 2 * oy + dy, 2 * ox + dxo]] += g4[[s, ch, oy, ox]];
                    }
                }
            }
        }
        sink.accumulate(x, dx.into_dyn());
    })
}

/// Mean over the spatial axes: `[N, C, H, W]` → `[N, C]`. Makes the
/// discriminator head independent of patch size.
pub fn spatial_mean<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut out = Array2::<T>::zeros((n, c));
    for s in 0..n {
        for ch in 0..c {
            out[[s, ch]] = x4
                .index_axis(Axis(0), s)
                .index_axis(Axis(0), ch)
                .iter()
                .fold(T::zero(), |acc, &v| acc + v)
                * inv;
        }
    }
    tape.push(out.into_dyn(), move |grad, sink| {
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for s in 0..n {
            for ch in 0..c {
                let g = grad[[s, ch]] * inv;
                dx.index_axis_mut(Axis(0), s)
                    .index_axis_mut(Axis(0), ch)
                    .fill(g);
            }
        }
        sink.accumulate(x, dx.into_dyn());
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_unary_op;
    use crate::ops;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_picks_maximum_and_halves_dims() {
        let mut x = ArrayD::zeros(IxDyn(&[1, 1, 4, 4]));
        x[[0, 0, 1, 0]] = 3.0;
        x[[0, 0, 2, 3]] = 5.0;
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x);
        let y = maxpool2(&tape, xv);
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[1, 1, 2, 2]);
        assert_eq!(yv[[0, 0, 0, 0]], 3.0);
        assert_eq!(yv[[0, 0, 1, 1]], 5.0);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner_only() {
        let mut x = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        x[[0, 0, 1, 1]] = 2.0;
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x);
        let y = maxpool2(&tape, xv);
        let loss = ops::sum_all(&tape, y);
        let grads = tape.backward(loss);
        let dx = grads.wrt(xv).unwrap();
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        // Distinct values keep the argmax stable under the FD perturbation.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        vals.shuffle(&mut rng);
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 1, 4, 4]), vals).unwrap();
        check_unary_op(&x, 1e-3, |tape, v| {
            let y = maxpool2(tape, v);
            ops::mean_all(tape, ops::square(tape, y))
        });
    }

    #[test]
    fn spatial_mean_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3, 5]), |_| rng.random_range(-1.0..1.0));
        check_unary_op(&x, 1e-3, |tape, v| {
            let y = spatial_mean(tape, v);
            ops::mean_all(tape, ops::square(tape, y))
        });
    }
}
