//! Batch and instance normalization.
//!
//! Both normalize to zero mean / unit variance with a learned per-channel
//! affine map; they differ in the axes the statistics pool over. Batch norm
//! (denoiser encoder) pools over `(N, H, W)` and maintains running statistics
//! for inference; instance norm (generator) pools over `(H, W)` per sample,
//! needs no running state, and is therefore deterministic at inference by
//! construction.

use std::rc::Rc;

use ndarray::{Array1, ArrayD, Axis};

use hdrvid_core::Real;

use super::view4;
use crate::tape::{Tape, Var};

/// Whether batch norm uses batch statistics (and updates the running ones) or
/// the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Batch normalization over `[N, C, H, W]` with per-channel affine
/// parameters. In [`BatchNormMode::Train`] the batch statistics normalize the
/// activations and the running estimates are updated in place
/// (`running ← (1−momentum)·running + momentum·batch`, variance unbiased as
/// is conventional); in [`BatchNormMode::Eval`] the running statistics are
/// used and left untouched.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Real>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &mut ArrayD<T>,
    running_var: &mut ArrayD<T>,
    momentum: T,
    eps: T,
    mode: BatchNormMode,
) -> Var {
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    assert_eq!(gv.shape(), [c], "gamma must be per-channel");
    assert_eq!(bv.shape(), [c], "beta must be per-channel");
    assert_eq!(running_mean.shape(), [c], "running mean must be per-channel");
    assert_eq!(running_var.shape(), [c], "running var must be per-channel");
    let m = n * h * w;
    assert!(m > 0, "batchnorm2d on an empty tensor");

    // Statistics in f64: the per-channel reductions run over the whole batch
    // and single-precision accumulation drifts at these sizes.
    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for s in 0..n {
                    for v in x4.index_axis(Axis(0), s).index_axis(Axis(0), ch).iter() {
                        let v = v.as_f64();
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let mu = sum / m as f64;
                mean[ch] = mu;
                var[ch] = (sum_sq / m as f64 - mu * mu).max(0.0);
            }
            let mom = momentum.as_f64();
            let bessel = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            for ch in 0..c {
                let rm = running_mean[[ch]].as_f64();
                let rv = running_var[[ch]].as_f64();
                running_mean[[ch]] = T::lit((1.0 - mom) * rm + mom * mean[ch]);
                running_var[[ch]] = T::lit((1.0 - mom) * rv + mom * var[ch] * bessel);
            }
            (mean, var)
        }
        BatchNormMode::Eval => {
            let mean: Vec<f64> = (0..c).map(|ch| running_mean[[ch]].as_f64()).collect();
            let var: Vec<f64> = (0..c).map(|ch| running_var[[ch]].as_f64()).collect();
            (mean, var)
        }
    };

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::lit(1.0 / (v + eps.as_f64()).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();

    let mut xhat = ArrayD::<T>::zeros(xv.raw_dim());
    let mut out = ArrayD::<T>::zeros(xv.raw_dim());
    {
        let mut xhat4 = xhat.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        for s in 0..n {
            for ch in 0..c {
                let g = gv[[ch]];
                let b = bv[[ch]];
                let mu = mean_t[ch];
                let is = inv_std[ch];
                let src = x4.index_axis(Axis(0), s);
                let src = src.index_axis(Axis(0), ch);
                let mut xh = xhat4.index_axis_mut(Axis(0), s);
                let mut xh = xh.index_axis_mut(Axis(0), ch);
                let mut dst = out4.index_axis_mut(Axis(0), s);
                let mut dst = dst.index_axis_mut(Axis(0), ch);
                for ((o, xh), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src.iter()) {
                    let normalized = (v - mu) * is;
                    *xh = normalized;
                    *o = g * normalized + b;
                }
            }
        }
    }
    let xhat = Rc::new(xhat);

    tape.push(out, move |grad, sink| {
        let g4 = view4(grad);
        let xhat4 = view4(&xhat);
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dx = ArrayD::<T>::zeros(grad.raw_dim());
        let mut dx4 = dx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        let inv_m = 1.0 / m as f64;
        for ch in 0..c {
            // Per-channel sums shared by the parameter and input gradients.
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for s in 0..n {
                let gy = g4.index_axis(Axis(0), s);
                let gy = gy.index_axis(Axis(0), ch);
                let xh = xhat4.index_axis(Axis(0), s);
                let xh = xh.index_axis(Axis(0), ch);
                for (&dy, &x) in gy.iter().zip(xh.iter()) {
                    sum_dy += dy.as_f64();
                    sum_dy_xhat += dy.as_f64() * x.as_f64();
                }
            }
            dbeta[ch] = T::lit(sum_dy);
            dgamma[ch] = T::lit(sum_dy_xhat);
            let g = gv[[ch]];
            let is = inv_std[ch];
            match mode {
                BatchNormMode::Train => {
                    let mean_dy = T::lit(sum_dy * inv_m);
                    let mean_dy_xhat = T::lit(sum_dy_xhat * inv_m);
                    for s in 0..n {
                        let gy = g4.index_axis(Axis(0), s);
                        let gy = gy.index_axis(Axis(0), ch);
                        let xh = xhat4.index_axis(Axis(0), s);
                        let xh = xh.index_axis(Axis(0), ch);
                        let mut d = dx4.index_axis_mut(Axis(0), s);
                        let mut d = d.index_axis_mut(Axis(0), ch);
                        for ((d, &dy), &x) in d.iter_mut().zip(gy.iter()).zip(xh.iter()) {
                            *d = g * is * (dy - mean_dy - x * mean_dy_xhat);
                        }
                    }
                }
                BatchNormMode::Eval => {
                    // Running statistics are constants: the chain is affine.
                    for s in 0..n {
                        let gy = g4.index_axis(Axis(0), s);
                        let gy = gy.index_axis(Axis(0), ch);
                        let mut d = dx4.index_axis_mut(Axis(0), s);
                        let mut d = d.index_axis_mut(Axis(0), ch);
                        for (d, &dy) in d.iter_mut().zip(gy.iter()) {
                            *d = g * is * dy;
                        }
                    }
                }
            }
        }
        drop(dx4);
        sink.accumulate(x, dx);
        sink.accumulate(gamma, dgamma.into_dyn());
        sink.accumulate(beta, dbeta.into_dyn());
    })
}

/// Instance normalization over `[N, C, H, W]`: statistics per `(sample,
/// channel)` over the spatial axes, per-channel affine parameters, no running
/// state.
pub fn instancenorm2d<T: Real>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Var {
    let xv = tape.value(x);
    let x4 = view4(&xv);
    let (n, c, h, w) = x4.dim();
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    assert_eq!(gv.shape(), [c], "gamma must be per-channel");
    assert_eq!(bv.shape(), [c], "beta must be per-channel");
    let m = h * w;
    assert!(m > 0, "instancenorm2d on an empty tensor");

    let mut inv_std = ndarray::Array2::<T>::zeros((n, c));
    let mut xhat = ArrayD::<T>::zeros(xv.raw_dim());
    let mut out = ArrayD::<T>::zeros(xv.raw_dim());
    {
        let mut xhat4 = xhat.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        for s in 0..n {
            for ch in 0..c {
                let src = x4.index_axis(Axis(0), s);
                let src = src.index_axis(Axis(0), ch);
                let mut sum = 0.0f64;
                let mut sum_sq = 0.0f64;
                for v in src.iter() {
                    let v = v.as_f64();
                    sum += v;
                    sum_sq += v * v;
                }
                let mu = sum / m as f64;
                let var = (sum_sq / m as f64 - mu * mu).max(0.0);
                let is = T::lit(1.0 / (var + eps.as_f64()).sqrt());
                inv_std[[s, ch]] = is;
                let mu = T::lit(mu);
                let g = gv[[ch]];
                let b = bv[[ch]];
                let mut xh = xhat4.index_axis_mut(Axis(0), s);
                let mut xh = xh.index_axis_mut(Axis(0), ch);
                let mut dst = out4.index_axis_mut(Axis(0), s);
                let mut dst = dst.index_axis_mut(Axis(0), ch);
                for ((o, xh), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src.iter()) {
                    let normalized = (v - mu) * is;
                    *xh = normalized;
                    *o = g * normalized + b;
                }
            }
        }
    }
    let xhat = Rc::new(xhat);

    tape.push(out, move |grad, sink| {
        let g4 = view4(grad);
        let xhat4 = view4(&xhat);
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dx = ArrayD::<T>::zeros(grad.raw_dim());
        let mut dx4 = dx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        let inv_m = 1.0 / m as f64;
        for s in 0..n {
            for ch in 0..c {
                let gy = g4.index_axis(Axis(0), s);
                let gy = gy.index_axis(Axis(0), ch);
                let xh = xhat4.index_axis(Axis(0), s);
                let xh = xh.index_axis(Axis(0), ch);
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for (&dy, &x) in gy.iter().zip(xh.iter()) {
                    sum_dy += dy.as_f64();
                    sum_dy_xhat += dy.as_f64() * x.as_f64();
                }
                dbeta[ch] += T::lit(sum_dy);
                dgamma[ch] += T::lit(sum_dy_xhat);
                let g = gv[[ch]];
                let is = inv_std[[s, ch]];
                let mean_dy = T::lit(sum_dy * inv_m);
                let mean_dy_xhat = T::lit(sum_dy_xhat * inv_m);
                let mut d = dx4.index_axis_mut(Axis(0), s);
                let mut d = d.index_axis_mut(Axis(0), ch);
                for ((d, &dy), &x) in d.iter_mut().zip(gy.iter()).zip(xh.iter()) {
                    *d = g * is * (dy - mean_dy - x * mean_dy_xhat);
                }
            }
        }
        drop(dx4);
        sink.accumulate(x, dx);
        sink.accumulate(gamma, dgamma.into_dyn());
        sink.accumulate(beta, dbeta.into_dyn());
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_unary_op;
    use crate::ops;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn train_mode_normalizes_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = random(&mut rng, &[3, 2, 4, 4]);
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x);
        let gamma = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let beta = tape.leaf(ArrayD::zeros(IxDyn(&[2])));
        let mut rm = ArrayD::zeros(IxDyn(&[2]));
        let mut rv = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        let y = batchnorm2d(
            &tape,
            xv,
            gamma,
            beta,
            &mut rm,
            &mut rv,
            0.1,
            1e-5,
            BatchNormMode::Train,
        );
        let yv = tape.value(y);
        let y4 = yv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|s| {
                    y4.index_axis(Axis(0), s)
                        .index_axis(Axis(0), ch)
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
        }
        // Running stats moved off their init toward the batch values.
        assert!(rm.iter().any(|v| v.abs() > 1e-12));
        assert!(rv.iter().all(|v| (v - 1.0).abs() < 1.0));
    }

    #[test]
    fn eval_mode_uses_running_statistics_and_leaves_them_alone() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.0));
        let gamma = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let beta = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let mut rm = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let mut rv = ArrayD::from_elem(IxDyn(&[1]), 4.0);
        let y = batchnorm2d(
            &tape,
            x,
            gamma,
            beta,
            &mut rm,
            &mut rv,
            0.1,
            0.0,
            BatchNormMode::Eval,
        );
        // (3-1)/2 * 2 + 0.5 = 2.5 everywhere.
        for v in tape.value(y).iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        assert_eq!(rm[[0]], 1.0);
        assert_eq!(rv[[0]], 4.0);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random(&mut rng, &[2, 2, 3, 3]);
        let g0 = random(&mut rng, &[2]);
        let b0 = random(&mut rng, &[2]);
        let build = |tape: &Tape<f64>, xv: Var, gv: Var, bv: Var| {
            let mut rm = ArrayD::zeros(IxDyn(&[2]));
            let mut rv = ArrayD::from_elem(IxDyn(&[2]), 1.0);
            let y = batchnorm2d(
                tape,
                xv,
                gv,
                bv,
                &mut rm,
                &mut rv,
                0.1,
                1e-5,
                BatchNormMode::Train,
            );
            ops::mean_all(tape, ops::square(tape, y))
        };
        check_unary_op(&x, 1e-3, |tape, xv| {
            let gv = tape.leaf(g0.clone());
            let bv = tape.leaf(b0.clone());
            build(tape, xv, gv, bv)
        });
        check_unary_op(&g0, 1e-3, |tape, gv| {
            let xv = tape.leaf(x.clone());
            let bv = tape.leaf(b0.clone());
            build(tape, xv, gv, bv)
        });
        check_unary_op(&b0, 1e-3, |tape, bv| {
            let xv = tape.leaf(x.clone());
            let gv = tape.leaf(g0.clone());
            build(tape, xv, gv, bv)
        });
    }

    #[test]
    fn batchnorm_eval_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(&mut rng, &[2, 2, 3, 3]);
        let g0 = random(&mut rng, &[2]);
        let b0 = random(&mut rng, &[2]);
        check_unary_op(&x, 1e-3, |tape, xv| {
            let gv = tape.leaf(g0.clone());
            let bv = tape.leaf(b0.clone());
            let mut rm = ArrayD::from_elem(IxDyn(&[2]), 0.3);
            let mut rv = ArrayD::from_elem(IxDyn(&[2]), 2.0);
            let y = batchnorm2d(
                tape,
                xv,
                gv,
                bv,
                &mut rm,
                &mut rv,
                0.1,
                1e-5,
                BatchNormMode::Eval,
            );
            ops::mean_all(tape, ops::square(tape, y))
        });
    }

    #[test]
    fn instancenorm_is_independent_per_sample() {
        // Shifting one sample by a constant must not change the other's
        // output (it would under batch norm).
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let base = random(&mut rng, &[2, 1, 4, 4]);
        let mut shifted = base.clone();
        shifted
            .index_axis_mut(Axis(0), 1)
            .mapv_inplace(|v| v + 100.0);

        let run = |input: ArrayD<f64>| {
            let tape = Tape::<f64>::new();
            let xv = tape.leaf(input);
            let gamma = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0));
            let beta = tape.leaf(ArrayD::zeros(IxDyn(&[1])));
            let y = instancenorm2d(&tape, xv, gamma, beta, 1e-5);
            tape.value(y).index_axis(Axis(0), 0).to_owned()
        };
        let a = run(base);
        let b = run(shifted);
        let diff = (&a - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "sample 0 output changed by {diff}");
    }

    #[test]
    fn instancenorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = random(&mut rng, &[2, 2, 3, 3]);
        let g0 = random(&mut rng, &[2]);
        let b0 = random(&mut rng, &[2]);
        check_unary_op(&x, 1e-3, |tape, xv| {
            let gv = tape.leaf(g0.clone());
            let bv = tape.leaf(b0.clone());
            let y = instancenorm2d(tape, xv, gv, bv, 1e-5);
            ops::mean_all(tape, ops::square(tape, y))
        });
        check_unary_op(&g0, 1e-3, |tape, gv| {
            let xv = tape.leaf(x.clone());
            let bv = tape.leaf(b0.clone());
            let y = instancenorm2d(tape, xv, gv, bv, 1e-5);
            ops::mean_all(tape, ops::square(tape, y))
        });
        check_unary_op(&b0, 1e-3, |tape, bv| {
            let xv = tape.leaf(x.clone());
            let gv = tape.leaf(g0.clone());
            let y = instancenorm2d(tape, xv, gv, bv, 1e-5);
            ops::mean_all(tape, ops::square(tape, y))
        });
    }
}
