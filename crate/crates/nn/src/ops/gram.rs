//! Channel co-occurrence (Gram) matrices for style comparison.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, IxDyn};

use hdrvid_core::Real;

use super::view4;
use crate::tape::{Tape, Var};

/// Gram matrix of one C×H×W map: `G[a][b] = Σ_{y,x} φ_a(y,x)·φ_b(y,x)`
/// normalized by `C·H·W`. Symmetric positive semidefinite by construction.
pub fn gram_matrix<T: Real>(map: &Array3<T>) -> Array2<T> {
    let (c, h, w) = map.dim();
    let flat = map
        .to_shape((c, h * w))
        .expect("feature map is contiguous");
    let scale = T::lit(1.0 / (c * h * w) as f64);
    let mut g = flat.dot(&flat.t());
    g.mapv_inplace(|v| v * scale);
    g
}

/// Batched Gram matrices: `[N, C, H, W]` → `[N, C, C]`, same normalization
/// as [`gram_matrix`].
pub fn gram_batch<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    let scale = T::lit(1.0 / (c * h * w) as f64);

    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c, c]));
    for i in 0..n {
        let flat = x4
            .index_axis(Axis(0), i)
            .to_shape((c, h * w))
            .expect("sample is contiguous")
            .to_owned();
        let mut g = flat.dot(&flat.t());
        g.mapv_inplace(|v| v * scale);
        out.index_axis_mut(Axis(0), i).assign(&g);
    }

    tape.push(out, move |grad, sink| {
        // G = s·XXᵀ per sample, so dX = s·(Ḡ + Ḡᵀ)·X.
        let x4 = view4(&xv);
        let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, c, h, w]));
        for i in 0..n {
            let g2 = grad
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .expect("gram gradient is [N, C, C]");
            let gsym = &g2 + &g2.t();
            let flat = x4
                .index_axis(Axis(0), i)
                .to_shape((c, h * w))
                .expect("sample is contiguous")
                .to_owned();
            let mut dflat = gsym.dot(&flat);
            dflat.mapv_inplace(|v| v * scale);
            dx.index_axis_mut(Axis(0), i)
                .assign(&dflat.to_shape((c, h, w)).expect("reshape back"));
        }
        sink.accumulate(x, dx);
    })
}
