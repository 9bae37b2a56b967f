//! Default flow backend: dense pyramidal Lucas-Kanade.
//!
//! A classical coarse-to-fine estimator with no trainable state, so the
//! pipeline runs with zero pretrained assets. Each pyramid level warps the
//! neighbor by the current flow, linearizes the residual around it, and solves
//! the regularized 2x2 normal equations over a box integration window at every
//! pixel. Estimation runs in `f64` regardless of the raster scalar; the
//! algorithm is iterative and benefits from the headroom.

use ndarray::{Array2, Array3};

use crate::frame::FlowField;
use crate::scalar::Real;

use super::{FlowBackend, FlowError};

/// Configuration for the pyramidal Lucas-Kanade estimator.
///
/// Defaults (4 levels, 3 refinement sweeps, 7x7 window) track displacements up
/// to roughly `2^levels` pixels on textured content, plenty for consecutive
/// video frames.
#[derive(Debug, Clone)]
pub struct PyramidalLucasKanade {
    /// Pyramid depth; the effective depth shrinks for small frames so the
    /// coarsest level still fits an integration window.
    pub levels: usize,
    /// Gauss-Newton sweeps per level.
    pub iterations: usize,
    /// Box window radius; the integration window is `(2r+1) x (2r+1)`.
    pub window_radius: usize,
    /// Tikhonov term added to the normal-equation diagonal; keeps flat,
    /// textureless regions at zero update instead of amplifying noise.
    pub regularization: f64,
}

impl Default for PyramidalLucasKanade {
    fn default() -> Self {
        Self {
            levels: 4,
            iterations: 3,
            window_radius: 3,
            regularization: 1e-4,
        }
    }
}

impl<T: Real> FlowBackend<T> for PyramidalLucasKanade {
    fn estimate(
        &self,
        reference: &Array3<T>,
        neighbor: &Array3<T>,
    ) -> Result<FlowField<T>, FlowError> {
        if reference.dim() != neighbor.dim() {
            let (h, w, _) = reference.dim();
            let (nh, nw, _) = neighbor.dim();
            return Err(FlowError::DimMismatch {
                expected: (h, w),
                found: (nh, nw),
            });
        }
        let reference = to_gray(reference);
        let neighbor = to_gray(neighbor);
        let flow = self.estimate_gray(&reference, &neighbor);
        let (h, w) = flow[0].dim();
        let mut data = Array3::<T>::zeros((h, w, 2));
        for y in 0..h {
            for x in 0..w {
                data[[y, x, 0]] = T::lit(flow[0][[y, x]]);
                data[[y, x, 1]] = T::lit(flow[1][[y, x]]);
            }
        }
        Ok(FlowField::new(data).expect("LK flow is finite"))
    }

    fn trainable(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str {
        "pyramidal-lucas-kanade"
    }
}

impl PyramidalLucasKanade {
    /// Coarse-to-fine estimation on grayscale rasters; returns `[dx, dy]`.
    fn estimate_gray(&self, reference: &Array2<f64>, neighbor: &Array2<f64>) -> [Array2<f64>; 2] {
        let ref_pyr = build_pyramid(reference, self.effective_levels(reference.dim()));
        let nbr_pyr = build_pyramid(neighbor, ref_pyr.len());
        let (ch, cw) = ref_pyr.last().expect("pyramid is non-empty").dim();
        let mut flow = [Array2::<f64>::zeros((ch, cw)), Array2::<f64>::zeros((ch, cw))];
        for level in (0..ref_pyr.len()).rev() {
            self.refine_level(&ref_pyr[level], &nbr_pyr[level], &mut flow);
            if level > 0 {
                let (nh, nw) = ref_pyr[level - 1].dim();
                flow = [
                    upsample_flow_component(&flow[0], nh, nw),
                    upsample_flow_component(&flow[1], nh, nw),
                ];
            }
        }
        flow
    }

    fn effective_levels(&self, (h, w): (usize, usize)) -> usize {
        // The coarsest level must still hold an integration window.
        let min_size = 2 * self.window_radius + 3;
        let mut levels = 1;
        let mut dim = h.min(w);
        while levels < self.levels.max(1) && dim / 2 >= min_size {
            dim /= 2;
            levels += 1;
        }
        levels
    }

    fn refine_level(&self, reference: &Array2<f64>, neighbor: &Array2<f64>, flow: &mut [Array2<f64>; 2]) {
        let (h, w) = reference.dim();
        let max_step = (self.window_radius + 1) as f64;
        for _ in 0..self.iterations {
            let warped = warp_gray(neighbor, flow);
            let (ix, iy) = central_gradients(&warped);
            let it = &warped - reference;

            let sxx = box_sum(&(&ix * &ix), self.window_radius);
            let sxy = box_sum(&(&ix * &iy), self.window_radius);
            let syy = box_sum(&(&iy * &iy), self.window_radius);
            let sxt = box_sum(&(&ix * &it), self.window_radius);
            let syt = box_sum(&(&iy * &it), self.window_radius);

            for y in 0..h {
                for x in 0..w {
                    let a = sxx[[y, x]] + self.regularization;
                    let b = sxy[[y, x]];
                    let c = syy[[y, x]] + self.regularization;
                    let det = a * c - b * b;
                    if det <= f64::EPSILON {
                        continue;
                    }
                    let r0 = -sxt[[y, x]];
                    let r1 = -syt[[y, x]];
                    let du = ((c * r0 - b * r1) / det).clamp(-max_step, max_step);
                    let dv = ((a * r1 - b * r0) / det).clamp(-max_step, max_step);
                    flow[0][[y, x]] += du;
                    flow[1][[y, x]] += dv;
                }
            }
            // A light smoothing pass propagates estimates across
            // low-texture pixels that the data term left untouched.
            flow[0] = mean_filter3(&flow[0]);
            flow[1] = mean_filter3(&flow[1]);
        }
    }
}

/// Channel mean in `f64`.
fn to_gray<T: Real>(frame: &Array3<T>) -> Array2<f64> {
    let (h, w, c) = frame.dim();
    let inv = 1.0 / c as f64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ch| frame[[y, x, ch]].as_f64()).sum::<f64>() * inv
    })
}

/// Binomial-blur-then-decimate pyramid, finest level first.
fn build_pyramid(img: &Array2<f64>, levels: usize) -> Vec<Array2<f64>> {
    let mut pyr = vec![img.clone()];
    for _ in 1..levels {
        pyr.push(downsample(pyr.last().expect("non-empty")));
    }
    pyr
}

fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let blurred = binomial_blur(img);
    let (h, w) = blurred.dim();
    Array2::from_shape_fn((h.div_ceil(2), w.div_ceil(2)), |(y, x)| {
        blurred[[(2 * y).min(h - 1), (2 * x).min(w - 1)]]
    })
}

/// Separable [1 2 1]/4 blur with replicated edges.
fn binomial_blur(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            tmp[[y, x]] = 0.25 * img[[y, xm]] + 0.5 * img[[y, x]] + 0.25 * img[[y, xp]];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            out[[y, x]] = 0.25 * tmp[[ym, x]] + 0.5 * tmp[[y, x]] + 0.25 * tmp[[yp, x]];
        }
    }
    out
}

/// Bilinear resize of one flow component with values rescaled by the size
/// ratio, so a displacement measured at the coarse level means the same
/// physical motion at the fine level.
fn upsample_flow_component(flow: &Array2<f64>, nh: usize, nw: usize) -> Array2<f64> {
    let (h, w) = flow.dim();
    let scale = nw as f64 / w as f64;
    let sy = if nh > 1 { (h - 1) as f64 / (nh - 1) as f64 } else { 0.0 };
    let sx = if nw > 1 { (w - 1) as f64 / (nw - 1) as f64 } else { 0.0 };
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        scale * sample_gray(flow, y as f64 * sy, x as f64 * sx)
    })
}

fn sample_gray(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn warp_gray(img: &Array2<f64>, flow: &[Array2<f64>; 2]) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        sample_gray(
            img,
            y as f64 + flow[1][[y, x]],
            x as f64 + flow[0][[y, x]],
        )
    })
}

/// Central differences with one-sided stencils at the borders.
fn central_gradients(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let ix = Array2::from_shape_fn((h, w), |(y, x)| {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(w - 1);
        (img[[y, xp]] - img[[y, xm]]) / (xp - xm).max(1) as f64
    });
    let iy = Array2::from_shape_fn((h, w), |(y, x)| {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        (img[[yp, x]] - img[[ym, x]]) / (yp - ym).max(1) as f64
    });
    (ix, iy)
}

/// Box-window sum with replicated edges, separable in two passes.
fn box_sum(img: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = radius as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -r..=r {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                acc += img[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -r..=r {
                let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                acc += tmp[[yy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn mean_filter3(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ky in -1isize..=1 {
            for kx in -1isize..=1 {
                let yy = (y as isize + ky).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + kx).clamp(0, w as isize - 1) as usize;
                acc += img[[yy, xx]];
            }
        }
        acc / 9.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth multi-frequency pattern; evaluating at shifted coordinates gives
    /// an exactly translated image without resampling error.
    fn pattern(y: f64, x: f64) -> f64 {
        0.5 + 0.2 * (x * 0.37).sin() * (y * 0.23).cos()
            + 0.15 * (x * 0.11 + y * 0.19).sin()
            + 0.1 * (y * 0.41).sin()
    }

    fn frame_shifted(h: usize, w: usize, shift_x: f64) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
            pattern(y as f64, x as f64 - shift_x).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let frame = frame_shifted(48, 48, 0.0);
        let backend = PyramidalLucasKanade::default();
        let flow: FlowField<f64> = backend.estimate(&frame, &frame).unwrap();
        assert!(
            flow.mean_magnitude() < 0.5,
            "mean |flow| = {} on identical frames",
            flow.mean_magnitude()
        );
    }

    #[test]
    fn recovers_global_horizontal_shift() {
        // Neighbor content sits 5 px right of the reference, so sampling the
        // neighbor at x + 5 reproduces the reference: expected dx = +5.
        let reference = frame_shifted(96, 96, 0.0);
        let neighbor = frame_shifted(96, 96, 5.0);
        let backend = PyramidalLucasKanade::default();
        let flow: FlowField<f64> = backend.estimate(&reference, &neighbor).unwrap();
        let (mut sum_dx, mut sum_abs_dy, mut n) = (0.0, 0.0, 0usize);
        for y in 12..84 {
            for x in 12..84 {
                sum_dx += flow.data()[[y, x, 0]];
                sum_abs_dy += flow.data()[[y, x, 1]].abs();
                n += 1;
            }
        }
        let mean_dx = sum_dx / n as f64;
        let mean_abs_dy = sum_abs_dy / n as f64;
        assert!(
            (mean_dx - 5.0).abs() < 1.0,
            "interior mean dx = {mean_dx}, expected about +5"
        );
        assert!(mean_abs_dy < 0.5, "interior mean |dy| = {mean_abs_dy}");
    }

    #[test]
    fn output_dims_match_input() {
        let frame = frame_shifted(33, 47, 0.0);
        let backend = PyramidalLucasKanade::default();
        let flow: FlowField<f64> = backend.estimate(&frame, &frame).unwrap();
        assert_eq!((flow.height(), flow.width()), (33, 47));
    }

    #[test]
    fn rejects_dim_mismatch() {
        let a = frame_shifted(16, 16, 0.0);
        let b = frame_shifted(16, 18, 0.0);
        let backend = PyramidalLucasKanade::default();
        let err = FlowBackend::<f64>::estimate(&backend, &a, &b);
        assert!(matches!(err, Err(FlowError::DimMismatch { .. })));
    }

    #[test]
    fn shrinks_pyramid_for_small_frames() {
        let backend = PyramidalLucasKanade::default();
        assert_eq!(backend.effective_levels((16, 16)), 1);
        assert_eq!(backend.effective_levels((96, 96)), 4);
    }
}
