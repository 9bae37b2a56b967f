//! Quantitative evaluation: MSE, PSNR, SSIM, and sequence reports.
//!
//! Reconstruction quality is scored in the tonemapped domain after cropping a
//! fixed border, mirroring how fusion artifacts concentrate at frame edges.
//! PSNR follows the 255-peak convention; since it is scale-invariant when the
//! peak matches the data range, `[0,1]` rasters score identically at peak 1.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FrameError, LinearHdrFrame};
use crate::radiometry::{normalize_radiance, tonemap, RadiometryError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("rasters have different shapes: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("raster {got:?} is smaller than the {needed}x{needed} window")]
    TooSmall { needed: usize, got: (usize, usize) },
    #[error("sequences have different lengths: {gt} ground-truth vs {pred} predicted")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("cannot evaluate an empty sequence")]
    Empty,
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
    #[error("failed to read or write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_same_shape<T: Real>(a: &Array3<T>, b: &Array3<T>) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse<T: Real>(gt: &Array3<T>, pred: &Array3<T>) -> Result<f64, MetricsError> {
    check_same_shape(gt, pred)?;
    let n = gt.len() as f64;
    let sum = gt
        .iter()
        .zip(pred.iter())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>();
    Ok(sum / n)
}

/// How [`psnr_with`] reports a zero-MSE (identical) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ZeroMsePolicy {
    /// Return a finite cap, so downstream averaging stays well-defined.
    Cap(f64),
    /// Return `f64::INFINITY`.
    Infinite,
}

impl Default for ZeroMsePolicy {
    fn default() -> Self {
        ZeroMsePolicy::Cap(99.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PsnrOptions {
    /// Largest representable value of the inputs' scale.
    pub peak: f64,
    pub zero_mse: ZeroMsePolicy,
}

impl Default for PsnrOptions {
    fn default() -> Self {
        Self {
            peak: 1.0,
            zero_mse: ZeroMsePolicy::default(),
        }
    }
}

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`.
pub fn psnr_with<T: Real>(
    gt: &Array3<T>,
    pred: &Array3<T>,
    opts: &PsnrOptions,
) -> Result<f64, MetricsError> {
    let err = mse(gt, pred)?;
    if err == 0.0 {
        return Ok(match opts.zero_mse {
            ZeroMsePolicy::Cap(cap) => cap,
            ZeroMsePolicy::Infinite => f64::INFINITY,
        });
    }
    Ok(10.0 * (opts.peak * opts.peak / err).log10())
}

/// [`psnr_with`] for `[0,1]` rasters under the default zero-MSE cap.
pub fn psnr<T: Real>(gt: &Array3<T>, pred: &Array3<T>) -> Result<f64, MetricsError> {
    psnr_with(gt, pred, &PsnrOptions::default())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, data range 1. Channels are scored independently and
/// averaged; the local map is averaged over windows that fit entirely inside
/// the frame, so no padding policy leaks into the score.
pub fn ssim<T: Real>(gt: &Array3<T>, pred: &Array3<T>) -> Result<f64, MetricsError> {
    check_same_shape(gt, pred)?;
    let (h, w, c) = gt.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            needed: SSIM_WINDOW,
            got: (h, w),
        });
    }
    let mut acc = 0.0;
    for ch in 0..c {
        let a = Array2::from_shape_fn((h, w), |(y, x)| gt[[y, x, ch]].as_f64());
        let b = Array2::from_shape_fn((h, w), |(y, x)| pred[[y, x, ch]].as_f64());
        acc += ssim_single(&a, &b);
    }
    Ok(acc / c as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter; output shrinks by `window - 1`.
fn gaussian_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * img[[y, x + i]];
            }
            rows[[y, x]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * rows[[y + i, x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

fn ssim_single(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_a = gaussian_valid(a, &k);
    let mu_b = gaussian_valid(b, &k);
    let aa = gaussian_valid(&(a * a), &k);
    let bb = gaussian_valid(&(b * b), &k);
    let ab = gaussian_valid(&(a * b), &k);
    let mut sum = 0.0;
    let n = mu_a.len() as f64;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter())
        .zip(bb.iter())
        .zip(ab.iter())
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / n
}

/// Domain in which sequence metrics are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDomain {
    /// mu-law compressed, the standard protocol.
    Tonemapped,
    /// Raw normalized radiance, for diagnostics.
    Linear,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Pixels cropped from every side before scoring.
    pub border_px: usize,
    /// mu-law parameter for the tonemapped domain.
    pub mu: f64,
    /// Radiance normalization scale shared by ground truth and prediction.
    pub hdr_scale: f64,
    pub domain: EvalDomain,
    pub psnr: PsnrOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            border_px: 10,
            mu: crate::frame::DEFAULT_MU,
            hdr_scale: 1.0,
            domain: EvalDomain::Tonemapped,
            psnr: PsnrOptions::default(),
        }
    }
}

/// One scored frame. `hdr_vdp2` is never produced by this toolkit; the column
/// exists so externally computed values can be merged into the same report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hdr_vdp2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub domain: EvalDomain,
    pub border_px: usize,
    pub mu: f64,
    pub hdr_scale: f64,
    pub per_frame: Vec<FrameScore>,
    pub summary: EvalSummary,
}

impl SequenceReport {
    pub fn save_json(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scores a predicted sequence against ground truth: crop the border,
/// normalize radiance by a shared scale, map into the evaluation domain, and
/// compute per-frame plus mean PSNR/SSIM.
pub fn evaluate_sequence<T: Real>(
    gt_frames: &[LinearHdrFrame<T>],
    pred_frames: &[LinearHdrFrame<T>],
    opts: &EvalOptions,
) -> Result<SequenceReport, MetricsError> {
    if gt_frames.len() != pred_frames.len() {
        return Err(MetricsError::LengthMismatch {
            gt: gt_frames.len(),
            pred: pred_frames.len(),
        });
    }
    if gt_frames.is_empty() {
        return Err(MetricsError::Empty);
    }
    let scale = T::lit(opts.hdr_scale);
    let mu = T::lit(opts.mu);
    let to_domain = |frame: &LinearHdrFrame<T>| -> Result<Array3<T>, MetricsError> {
        let cropped =
            LinearHdrFrame::new(crate::dataio::crop_border(frame.data(), opts.border_px)?)?;
        let normalized = normalize_radiance(&cropped, scale)?;
        Ok(match opts.domain {
            EvalDomain::Tonemapped => tonemap(&normalized, mu)?.into_data(),
            EvalDomain::Linear => normalized.into_data(),
        })
    };
    let mut per_frame = Vec::with_capacity(gt_frames.len());
    let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
    for (i, (gt, pred)) in gt_frames.iter().zip(pred_frames.iter()).enumerate() {
        let g = to_domain(gt)?;
        let p = to_domain(pred)?;
        let frame_psnr = psnr_with(&g, &p, &opts.psnr)?;
        let frame_ssim = ssim(&g, &p)?;
        sum_psnr += frame_psnr;
        sum_ssim += frame_ssim;
        per_frame.push(FrameScore {
            frame: i,
            psnr: frame_psnr,
            ssim: frame_ssim,
            hdr_vdp2: None,
        });
    }
    let n = per_frame.len() as f64;
    Ok(SequenceReport {
        domain: opts.domain,
        border_px: opts.border_px,
        mu: opts.mu,
        hdr_scale: opts.hdr_scale,
        per_frame,
        summary: EvalSummary {
            frames: gt_frames.len(),
            mean_psnr: sum_psnr / n,
            mean_ssim: sum_ssim / n,
        },
    })
}
