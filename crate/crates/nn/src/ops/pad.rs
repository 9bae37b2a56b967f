//! Spatial padding and cropping.
//!
//! The encoder/decoder models require dims divisible by a power of two;
//! callers reflect-pad inputs up to the next multiple and crop the output
//! back. Reflection (mirror about the edge pixel, which itself is not
//! repeated) avoids the dark halo zero padding would feed into the first
//! convolutions.

use ndarray::Array4;

use hdrvid_core::Real;

use super::view4;
use crate::tape::{Tape, Var};

/// Mirror index for reflect padding: maps a possibly out-of-range coordinate
/// into `[0, n)` by reflecting about the borders without repeating them.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let mut i = i;
    // Two reflections suffice while pad < n, which `pad_reflect` asserts.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!((0..n).contains(&i));
    i as usize
}

/// Reflect-pads the spatial axes of `[N, C, H, W]` by `(top, bottom, left,
/// right)`. Each pad must be smaller than the corresponding input dim.
pub fn pad_reflect<T: Real>(
    tape: &Tape<T>,
    x: Var,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Var {
    if top == 0 && bottom == 0 && left == 0 && right == 0 {
        return x;
    }
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    assert!(
        top < h && bottom < h && left < w && right < w,
        "reflect pad ({top},{bottom},{left},{right}) too large for {h}x{w}"
    );
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let sy = reflect(oy as isize - top as isize, h);
                for ox in 0..ow {
                    let sx = reflect(ox as isize - left as isize, w);
                    out[[s, ch, oy, ox]] = x4[[s, ch, sy, sx]];
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
                    let sy = reflect(oy as isize - top as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - left as isize, w);
                        dx[[s, ch, sy, sx]] += g4[[s, ch, oy, ox]];
                    }
                }
            }
        }
        sink.accumulate(x, dx.into_dyn());
    })
}

/// Crops a `[N, C, H, W]` tensor to `out_h`×`out_w` starting at `(top, left)`.
pub fn crop_spatial<T: Real>(
    tape: &Tape<T>,
    x: Var,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Var {
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    assert!(
        top + out_h <= h && left + out_w <= w,
        "crop {out_h}x{out_w}+({top},{left}) exceeds {h}x{w}"
    );
    if top == 0 && left == 0 && out_h == h && out_w == w {
        return x;
    }
    let out = x4
        .slice(ndarray::s![.., .., top..top + out_h, left..left + out_w])
        .to_owned();
    tape.push(out.into_dyn(), move |grad, sink| {
        let g4 = view4(grad);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        dx.slice_mut(ndarray::s![.., .., top..top + out_h, left..left + out_w])
            .assign(&g4);
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
    fn reflect_mirrors_without_repeating_edge() {
        // Row [a b c] padded by 2 on the left becomes [c b a b c].
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![1.0, 2.0, 3.0]).unwrap();
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x);
        let y = pad_reflect(&tape, xv, 0, 0, 2, 0);
        let yv = tape.value(y);
        assert_eq!(
            yv.as_slice().unwrap(),
            &[3.0, 2.0, 1.0, 2.0, 3.0],
            "mirror about the edge pixel, edge not duplicated"
        );
    }

    #[test]
    fn crop_undoes_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 5, 6]), |_| rng.random_range(0.0..1.0));
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let padded = pad_reflect(&tape, xv, 1, 2, 3, 1);
        assert_eq!(tape.value(padded).shape(), &[1, 2, 8, 10]);
        let back = crop_spatial(&tape, padded, 1, 3, 5, 6);
        assert_eq!(&*tape.value(back), &x);
    }

    #[test]
    fn pad_reflect_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.random_range(-1.0..1.0));
        check_unary_op(&x, 1e-3, |tape, v| {
            let y = pad_reflect(tape, v, 2, 1, 1, 2);
            ops::mean_all(tape, ops::square(tape, y))
        });
    }

    #[test]
    fn crop_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 5, 5]), |_| rng.random_range(-1.0..1.0));
        check_unary_op(&x, 1e-3, |tape, v| {
            let y = crop_spatial(tape, v, 1, 2, 3, 2);
            ops::mean_all(tape, ops::square(tape, y))
        });
    }
}
