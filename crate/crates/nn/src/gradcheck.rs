//! Finite-difference gradient verification.
//!
//! Used throughout the test suites: every differentiable op and every loss
//! term is validated against central differences on small f64 problems. The
//! comparison metric is an elementwise relative error with a floor on the
//! denominator, so near-zero gradients are judged on absolute terms.

use ndarray::ArrayD;

use crate::tape::{Tape, Var};

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff<F>(f: &F, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let slot = probe.as_slice_mut().expect("standard layout");
        let original = slot[i];
        slot[i] = original + eps;
        let plus = f(&probe);
        let slot = probe.as_slice_mut().expect("standard layout");
        slot[i] = original - eps;
        let minus = f(&probe);
        let slot = probe.as_slice_mut().expect("standard layout");
        slot[i] = original;
        grad.as_slice_mut().expect("standard layout")[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise relative error between two gradients, with the
/// denominator floored at `1e-4` so that near-zero entries compare by
/// absolute difference instead of blowing up.
pub fn max_relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Verifies the tape gradient of a scalar-valued graph against central
/// differences, perturbing the single input `x`. `build` must construct the
/// same graph on every call (other inputs captured as constants).
///
/// Panics with a diagnostic if the maximum relative error exceeds `tol`.
pub fn check_unary_op<F>(x: &ArrayD<f64>, tol: f64, build: F)
where
    F: Fn(&Tape<f64>, Var) -> Var,
{
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let loss = build(&tape, input);
    let grads = tape.backward(loss);
    let analytic = grads.wrt_or_zeros(input, x.shape());

    let eval = |probe: &ArrayD<f64>| -> f64 {
        let tape = Tape::new();
        let input = tape.leaf(probe.clone());
        let loss = build(&tape, input);
        tape.scalar(loss)
    };
    let numeric = finite_diff(&eval, x, 1e-5);

    let err = max_relative_error(&analytic, &numeric);
    assert!(
        err <= tol,
        "gradient check failed: max relative error {err:.3e} exceeds {tol:.1e}"
    );
}
