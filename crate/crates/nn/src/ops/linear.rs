//! Matrix products, dense layers, and spectral weight normalization.

use ndarray::{Array1, Array2, ArrayD, Axis};

use hdrvid_core::Real;

use super::view2;
use crate::tape::{Tape, Var};

/// `a [M, K] · b [K, N]`.
pub fn matmul<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Var {
    let av = tape.value(a);
    let bv = tape.value(b);
    let a2 = view2(&av);
    let b2 = view2(&bv);
    assert_eq!(
        a2.ncols(),
        b2.nrows(),
        "matmul: inner dims {} vs {}",
        a2.ncols(),
        b2.nrows()
    );
    let out = a2.dot(&b2);
    tape.push(out.into_dyn(), move |grad, sink| {
        let g2 = view2(grad);
        let a2 = view2(&av);
        let b2 = view2(&bv);
        sink.accumulate(a, g2.dot(&b2.t()).into_dyn());
        sink.accumulate(b, a2.t().dot(&g2).into_dyn());
    })
}

/// Fully connected layer: `x [N, F] · w [F, O] + b [O]`.
pub fn dense<T: Real>(tape: &Tape<T>, x: Var, weight: Var, bias: Option<Var>) -> Var {
    let xv = tape.value(x);
    let wv = tape.value(weight);
    let x2 = view2(&xv);
    let w2 = view2(&wv);
    assert_eq!(
        x2.ncols(),
        w2.nrows(),
        "dense: input features {} vs weight rows {}",
        x2.ncols(),
        w2.nrows()
    );
    let mut out = x2.dot(&w2);
    if let Some(b) = bias {
        let bv = tape.value(b);
        assert_eq!(bv.shape(), [w2.ncols()], "dense: bias per output unit");
        for mut row in out.rows_mut() {
            for (o, &b) in row.iter_mut().zip(bv.iter()) {
                *o += b;
            }
        }
    }
    tape.push(out.into_dyn(), move |grad, sink| {
        let g2 = view2(grad);
        let x2 = view2(&xv);
        let w2 = view2(&wv);
        sink.accumulate(x, g2.dot(&w2.t()).into_dyn());
        sink.accumulate(weight, x2.t().dot(&g2).into_dyn());
        if let Some(b) = bias {
            let db = g2.sum_axis(Axis(0));
            sink.accumulate(b, db.into_dyn());
        }
    })
}

fn normalized<T: Real>(v: Array1<T>) -> Array1<T> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    let inv = T::lit(1.0 / (norm + 1e-12));
    v.mapv(|x| x * inv)
}

/// Weight tensor flattened to the `[rows, cols]` matrix spectral
/// normalization operates on: first axis versus everything else.
fn as_matrix<T: Real>(w: &ArrayD<T>) -> Array2<T> {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    w.to_shape((rows, cols))
        .expect("contiguous weight")
        .to_owned()
}

/// One power-iteration update: `v = norm(Wᵀu)`, `u = norm(Wv)`.
fn power_step<T: Real>(w2: &Array2<T>, u: &Array1<T>) -> (Array1<T>, Array1<T>) {
    let v = normalized(w2.t().dot(u));
    let u_next = normalized(w2.dot(&v));
    (u_next, v)
}

/// Estimates the largest singular value of `weight` (flattened to 2-D) by
/// `iters` power-iteration steps, updating the persistent vector `u` in
/// place. This is the same estimator `spectral_normalize` uses, exposed so
/// it can be compared against a direct SVD.
pub fn power_iteration_sigma<T: Real>(weight: &ArrayD<T>, u: &mut ArrayD<T>, iters: usize) -> T {
    assert!(iters >= 1, "power_iteration_sigma needs at least one step");
    let w2 = as_matrix(weight);
    let mut u1: Array1<T> = u
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("u is a vector")
        .to_owned();
    assert_eq!(u1.len(), w2.nrows(), "u must match the weight's row count");
    let mut v = Array1::<T>::zeros(w2.ncols());
    for _ in 0..iters {
        let (u_next, v_next) = power_step(&w2, &u1);
        u1 = u_next;
        v = v_next;
    }
    let sigma = u1.dot(&w2.dot(&v));
    u.assign(&u1.into_dyn());
    sigma
}

/// Divides `weight` by its estimated spectral norm `σ = uᵀWv`.
///
/// `iters` power-iteration steps refresh the persistent vector `u` before σ
/// is formed (training uses 1; pass 0 at inference to reuse the stored `u`
/// without mutating it). The singular vectors enter the graph as constants,
/// so the gradient of σ with respect to the weight is the rank-one `u·vᵀ` —
/// the normalization is differentiated, not just applied.
pub fn spectral_normalize<T: Real>(
    tape: &Tape<T>,
    weight: Var,
    u: &mut ArrayD<T>,
    iters: usize,
) -> Var {
    let wv = tape.value(weight);
    let rows = wv.shape()[0];
    let cols = wv.len() / rows;
    let w2 = as_matrix(&wv);
    let mut u1: Array1<T> = u
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("u is a vector")
        .to_owned();
    assert_eq!(u1.len(), rows, "u must match the weight's row count");

    let v = if iters == 0 {
        normalized(w2.t().dot(&u1))
    } else {
        let mut v = Array1::<T>::zeros(cols);
        for _ in 0..iters {
            let (u_next, v_next) = power_step(&w2, &u1);
            u1 = u_next;
            v = v_next;
        }
        u.assign(&u1.clone().into_dyn());
        v
    };

    // σ as a graph node: u and v are constants, W is the live variable.
    let shape: Vec<usize> = wv.shape().to_vec();
    let w_mat = super::reshape(tape, weight, &[rows, cols]);
    let v_col = tape.leaf(v.insert_axis(Axis(1)).into_dyn());
    let u_col = tape.leaf(u1.insert_axis(Axis(1)).into_dyn());
    let wv_col = matmul(tape, w_mat, v_col); // [rows, 1]
    let u_wv = super::mul(tape, u_col, wv_col);
    let sigma = super::sum_all(tape, u_wv);
    // Guard keeps an all-zero weight at zero instead of dividing 0/0.
    let sigma_safe = super::scale_add(tape, sigma, T::one(), T::lit(1e-12));
    let normalized = super::div_by_scalar_var(tape, weight, sigma_safe);
    super::reshape(tape, normalized, &shape)
}
