//! Convolution and transposed convolution.
//!
//! Both directions share one unrolling pair: `im2col` gathers padded patches
//! into a matrix so the convolution becomes a GEMM, `col2im_add` is its
//! scatter-adjoint. The backward passes recompute the unrolled patches per
//! sample instead of caching them, trading a little compute for a flat memory
//! profile.

use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis, IxDyn};

use hdrvid_core::Real;

use super::view4;
use crate::tape::{Tape, Var};

/// Gathers `kh`×`kw` patches of a zero-padded `[C, H, W]` map on the output
/// grid `(grid_h, grid_w)` with the given stride, as a
/// `[C·kh·kw, grid_h·grid_w]` matrix.
fn im2col<T: Real>(
    x: ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<T> {
    let (channels, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((channels * kh * kw, grid_h * grid_w));
    for c in 0..channels {
        for i in 0..kh {
            for j in 0..kw {
                let row_index = (c * kh + i) * kw + j;
                let mut row = cols.row_mut(row_index);
                for gy in 0..grid_h {
                    let y = (gy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue; // padded region stays zero
                    }
                    let src = x.index_axis(Axis(0), c);
                    let src = src.index_axis(Axis(0), y as usize);
                    for gx in 0..grid_w {
                        let xx = (gx * stride + j) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        row[gy * grid_w + gx] = src[xx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adjoint of [`im2col`]: adds each column entry back to the padded
/// position it was gathered from, skipping positions that fall outside.
fn col2im_add<T: Real>(
    cols: &Array2<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
    out: &mut ArrayViewMut3<'_, T>,
) {
    let (channels, h, w) = out.dim();
    debug_assert_eq!(cols.nrows(), channels * kh * kw);
    debug_assert_eq!(cols.ncols(), grid_h * grid_w);
    for c in 0..channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = cols.row((c * kh + i) * kw + j);
                for gy in 0..grid_h {
                    let y = (gy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for gx in 0..grid_w {
                        let xx = (gx * stride + j) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        out[[c, y as usize, xx as usize]] += row[gy * grid_w + gx];
                    }
                }
            }
        }
    }
}

/// 2-D convolution: `x [N, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`,
/// zero padding `pad` on all sides, square stride. Output spatial size is
/// `(H + 2·pad − kh) / stride + 1` (floor).
pub fn conv2d<T: Real>(
    tape: &Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Var {
    assert!(stride >= 1, "conv2d stride must be at least 1");
    let xv = tape.value(x);
    let wv = tape.value(weight);
    let x4 = view4(&xv);
    let w4 = view4(&wv);
    let (n, c_in, h, w) = x4.dim();
    let (c_out, w_c_in, kh, kw) = w4.dim();
    assert_eq!(
        c_in, w_c_in,
        "conv2d: input has {c_in} channels, weight expects {w_c_in}"
    );
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw,
        "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
    );
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let bias_value = bias.map(|b| {
        let bv = tape.value(b);
        assert_eq!(
            bv.shape(),
            [c_out],
            "conv2d: bias must have one entry per output channel"
        );
        bv
    });

    let w2 = wv.to_shape((c_out, c_in * kh * kw)).expect("weight reshape");
    let mut out = Array4::<T>::zeros((n, c_out, oh, ow));
    for s in 0..n {
        let cols = im2col(x4.index_axis(Axis(0), s), kh, kw, stride, pad, oh, ow);
        let y2 = w2.dot(&cols); // [c_out, oh*ow]
        let mut out_s = out.index_axis_mut(Axis(0), s);
        for c in 0..c_out {
            let offset = bias_value.as_ref().map_or(T::zero(), |b| b[[c]]);
            let row = y2.row(c);
            let mut plane = out_s.index_axis_mut(Axis(0), c);
            for (dst, src) in plane.iter_mut().zip(row.iter()) {
                *dst = *src + offset;
            }
        }
    }

    tape.push(out.into_dyn(), move |grad, sink| {
        let g4 = view4(grad);
        let x4 = view4(&xv);
        let w2 = wv.to_shape((c_out, c_in * kh * kw)).expect("weight reshape");
        let mut dw2 = Array2::<T>::zeros((c_out, c_in * kh * kw));
        let mut dx = Array4::<T>::zeros((n, c_in, h, w));
        let mut db = bias.map(|_| ndarray::Array1::<T>::zeros(c_out));
        for s in 0..n {
            let g_s = g4.index_axis(Axis(0), s);
            let g2 = g_s.to_shape((c_out, oh * ow)).expect("grad reshape");
            if let Some(db) = db.as_mut() {
                for c in 0..c_out {
                    db[c] += g2.row(c).sum();
                }
            }
            let cols = im2col(x4.index_axis(Axis(0), s), kh, kw, stride, pad, oh, ow);
            dw2 += &g2.dot(&cols.t());
            let dcols = w2.t().dot(&g2); // [c_in*kh*kw, oh*ow]
            let mut dx_s = dx.index_axis_mut(Axis(0), s);
            col2im_add(&dcols, kh, kw, stride, pad, oh, ow, &mut dx_s);
        }
        sink.accumulate(x, dx.into_dyn());
        let dw = dw2
            .to_shape(IxDyn(&[c_out, c_in, kh, kw]))
            .expect("grad reshape")
            .to_owned();
        sink.accumulate(weight, dw);
        if let (Some(b), Some(db)) = (bias, db) {
            sink.accumulate(b, db.into_dyn());
        }
    })
}

/// Transposed 2-D convolution (fractionally strided): `x [N, Cin, H, W]`
/// with weights `[Cin, Cout, kh, kw]`. Output spatial size is
/// `(H − 1)·stride + kh − 2·pad`, the adjoint of [`conv2d`]'s shape rule.
pub fn conv_transpose2d<T: Real>(
    tape: &Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Var {
    assert!(stride >= 1, "conv_transpose2d stride must be at least 1");
    let xv = tape.value(x);
    let wv = tape.value(weight);
    let x4 = view4(&xv);
    let w4 = view4(&wv);
    let (n, c_in, h, w) = x4.dim();
    let (w_c_in, c_out, kh, kw) = w4.dim();
    assert_eq!(
        c_in, w_c_in,
        "conv_transpose2d: input has {c_in} channels, weight expects {w_c_in}"
    );
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    assert!(
        oh > 2 * pad && ow > 2 * pad,
        "conv_transpose2d: padding {pad} consumes the whole {oh}x{ow} output"
    );
    let oh = oh - 2 * pad;
    let ow = ow - 2 * pad;

    let bias_value = bias.map(|b| {
        let bv = tape.value(b);
        assert_eq!(
            bv.shape(),
            [c_out],
            "conv_transpose2d: bias must have one entry per output channel"
        );
        bv
    });

    let w2 = wv.to_shape((c_in, c_out * kh * kw)).expect("weight reshape");
    let mut out = Array4::<T>::zeros((n, c_out, oh, ow));
    for s in 0..n {
        let x_s = x4.index_axis(Axis(0), s);
        let x2 = x_s.to_shape((c_in, h * w)).expect("input reshape");
        let cols = w2.t().dot(&x2); // [c_out*kh*kw, h*w]
        let mut out_s = out.index_axis_mut(Axis(0), s);
        col2im_add(&cols, kh, kw, stride, pad, h, w, &mut out_s);
        if let Some(b) = bias_value.as_ref() {
            for c in 0..c_out {
                let offset = b[[c]];
                out_s
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| v + offset);
            }
        }
    }

    tape.push(out.into_dyn(), move |grad, sink| {
        let g4 = view4(grad);
        let x4 = view4(&xv);
        let w2 = wv.to_shape((c_in, c_out * kh * kw)).expect("weight reshape");
        let mut dw2 = Array2::<T>::zeros((c_in, c_out * kh * kw));
        let mut dx = Array4::<T>::zeros((n, c_in, h, w));
        let mut db = bias.map(|_| ndarray::Array1::<T>::zeros(c_out));
        for s in 0..n {
            let g_s = g4.index_axis(Axis(0), s);
            if let Some(db) = db.as_mut() {
                for c in 0..c_out {
                    db[c] += g_s.index_axis(Axis(0), c).sum();
                }
            }
            // The forward scattered columns on the (h, w) grid; the adjoint
            // gathers the same patches back out of the output gradient.
            let cols_dy = im2col(g_s, kh, kw, stride, pad, h, w);
            let x_s = x4.index_axis(Axis(0), s);
            let x2 = x_s.to_shape((c_in, h * w)).expect("input reshape");
            dw2 += &x2.dot(&cols_dy.t());
            let dx2 = w2.dot(&cols_dy); // [c_in, h*w]
            let dx2 = dx2.to_shape((c_in, h, w)).expect("grad reshape");
            dx.index_axis_mut(Axis(0), s).assign(&dx2);
        }
        sink.accumulate(x, dx.into_dyn());
        let dw = dw2
            .to_shape(IxDyn(&[c_in, c_out, kh, kw]))
            .expect("grad reshape")
            .to_owned();
        sink.accumulate(weight, dw);
        if let (Some(b), Some(db)) = (bias, db) {
            sink.accumulate(b, db.into_dyn());
        }
    })
}
