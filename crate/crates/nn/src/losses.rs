//! Training objectives: pixel L1, adversarial pair losses, perceptual
//! content/style terms, the weighted reconstruction composite, and temporal
//! regularization.
//!
//! Each objective comes in two forms. The `*_term` functions build
//! differentiable graph nodes on a tape for training. The frame-level
//! functions take tonemapped frames and return plain `f64` scalars for
//! evaluation and logging; they share the same math and are pinned to each
//! other by tests.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use hdrvid_core::flow::warp_backward;
use hdrvid_core::{FlowField, Real, TonemappedFrame};

use crate::error::NnError;
use crate::features::FeatureExtractor;
use crate::models::{hwc_to_nchw, DiscriminatorModel, ScoreHead};
use crate::ops;
use crate::tape::{Tape, Var};

pub use crate::ops::{gram_batch, gram_matrix};

/// Floor for log arguments in the adversarial losses.
pub const LOG_EPS: f64 = 1e-7;

/// Weights of the composite objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_content: f64,
    pub lambda_style: f64,
    pub lambda_l1: f64,
    /// Blend between reconstruction and temporal regularization in the
    /// total objective.
    pub alpha: f64,
    /// Also scales the content term by `lambda_style`, reproducing a
    /// printed form of the composite that reads as a typo. Off by default;
    /// kept as a switch so the two weightings can be compared.
    pub duplicate_content_term: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 5.0,
            lambda_content: 1.0,
            lambda_style: 1000.0,
            lambda_l1: 30.0,
            alpha: 0.3,
            duplicate_content_term: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), NnError> {
        let lambdas = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_content", self.lambda_content),
            ("lambda_style", self.lambda_style),
            ("lambda_l1", self.lambda_l1),
        ];
        for (name, value) in lambdas {
            if !value.is_finite() || value < 0.0 {
                return Err(NnError::Config(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NnError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Effective weight on the content term (doubles up with the style
    /// weight when the duplicated form is requested).
    fn content_weight(&self) -> f64 {
        if self.duplicate_content_term {
            self.lambda_content + self.lambda_style
        } else {
            self.lambda_content
        }
    }
}

fn check_frame_dims<T: Real>(
    context: &'static str,
    a: &TonemappedFrame<T>,
    b: &TonemappedFrame<T>,
) -> Result<(), NnError> {
    if a.data().dim() != b.data().dim() {
        let (eh, ew, ec) = a.data().dim();
        let (gh, gw, gc) = b.data().dim();
        return Err(NnError::ShapeMismatch {
            context,
            expected: vec![eh, ew, ec],
            got: vec![gh, gw, gc],
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape-level terms
// ---------------------------------------------------------------------------

/// Mean absolute difference between two same-shape tensors.
pub fn l1_term<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Var {
    let diff = ops::sub(tape, a, b);
    ops::mean_all(tape, ops::abs(tape, diff))
}

/// Discriminator and generator losses from probability scores `[N, 1]`:
/// `d = −E[log D(real)] − E[log(1 − D(fake))]`, `g = −E[log D(fake)]`
/// (non-saturating form). Scores are floored at [`LOG_EPS`] before the log.
pub fn adversarial_terms<T: Real>(tape: &Tape<T>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let eps = T::lit(LOG_EPS);
    let log_real = ops::mean_all(tape, ops::ln_clamped(tape, d_real, eps));
    let fake_flipped = ops::one_minus(tape, d_fake);
    let log_not_fake = ops::mean_all(tape, ops::ln_clamped(tape, fake_flipped, eps));
    let minus_one = T::lit(-1.0);
    let d_loss = ops::weighted_sum(tape, &[(log_real, minus_one), (log_not_fake, minus_one)]);
    (d_loss, generator_term(tape, d_fake))
}

/// The generator half of [`adversarial_terms`] alone: `−E[log D(fake)]`.
/// A generator update scores only fakes, so this skips the real forward.
pub fn generator_term<T: Real>(tape: &Tape<T>, d_fake: Var) -> Var {
    let eps = T::lit(LOG_EPS);
    let log_fake = ops::mean_all(tape, ops::ln_clamped(tape, d_fake, eps));
    ops::scale(tape, log_fake, T::lit(-1.0))
}

/// Content and style terms in one pass (they share the feature extraction).
///
/// Content: mean over layers of the per-channel-normalized L1 feature gap
/// `(1/N_j)·mean|φ_j(gt) − φ_j(gen)|`. Style: mean over layers of the
/// entrywise mean absolute Gram difference.
pub fn perceptual_terms<T: Real>(
    tape: &Tape<T>,
    extractor: &dyn FeatureExtractor<T>,
    gen: Var,
    gt: Var,
) -> (Var, Var) {
    let maps_gen = extractor.features(tape, gen);
    let maps_gt = extractor.features(tape, gt);
    let channels = extractor.layer_channels();
    assert_eq!(maps_gen.len(), channels.len());
    assert_eq!(maps_gt.len(), channels.len());
    let n_layers = channels.len() as f64;

    let mut content = Vec::with_capacity(channels.len());
    let mut style = Vec::with_capacity(channels.len());
    for ((g, t), &n_j) in maps_gen.iter().zip(&maps_gt).zip(channels) {
        let gap = ops::sub(tape, *t, *g);
        let layer_l1 = ops::mean_all(tape, ops::abs(tape, gap));
        content.push((layer_l1, T::lit(1.0 / (n_layers * n_j as f64))));

        let gram_gap = ops::sub(tape, gram_batch(tape, *t), gram_batch(tape, *g));
        let layer_style = ops::mean_all(tape, ops::abs(tape, gram_gap));
        style.push((layer_style, T::lit(1.0 / n_layers)));
    }
    (
        ops::weighted_sum(tape, &content),
        ops::weighted_sum(tape, &style),
    )
}

pub fn content_term<T: Real>(
    tape: &Tape<T>,
    extractor: &dyn FeatureExtractor<T>,
    gen: Var,
    gt: Var,
) -> Var {
    perceptual_terms(tape, extractor, gen, gt).0
}

pub fn style_term<T: Real>(
    tape: &Tape<T>,
    extractor: &dyn FeatureExtractor<T>,
    gen: Var,
    gt: Var,
) -> Var {
    perceptual_terms(tape, extractor, gen, gt).1
}

/// Root-mean-square gap between the current frame and the warped previous
/// frame. `flow` is `[N, H, W, 2]` and enters as a constant: the penalty
/// trains the frames, not the flow.
pub fn temporal_term<T: Real>(tape: &Tape<T>, cur: Var, prev: Var, flow: &ArrayD<T>) -> Var {
    let warped = ops::warp_bilinear(tape, prev, flow);
    let gap = ops::sub(tape, cur, warped);
    let mse = ops::mean_all(tape, ops::square(tape, gap));
    ops::sqrt_guarded(tape, mse)
}

/// Weighted sum of the four reconstruction components.
pub fn reconstruction_term<T: Real>(
    tape: &Tape<T>,
    weights: &LossWeights,
    adv_g: Var,
    content: Var,
    style: Var,
    l1: Var,
) -> Var {
    ops::weighted_sum(
        tape,
        &[
            (adv_g, T::lit(weights.lambda_adv)),
            (content, T::lit(weights.content_weight())),
            (style, T::lit(weights.lambda_style)),
            (l1, T::lit(weights.lambda_l1)),
        ],
    )
}

/// Affine blend `alpha·rec + (1 − alpha)·reg`.
pub fn total_term<T: Real>(tape: &Tape<T>, weights: &LossWeights, rec: Var, reg: Var) -> Var {
    ops::weighted_sum(
        tape,
        &[
            (rec, T::lit(weights.alpha)),
            (reg, T::lit(1.0 - weights.alpha)),
        ],
    )
}

// ---------------------------------------------------------------------------
// Frame-level scalars
// ---------------------------------------------------------------------------

/// Mean absolute difference between two tonemapped frames.
pub fn l1_loss<T: Real>(
    gen: &TonemappedFrame<T>,
    gt: &TonemappedFrame<T>,
) -> Result<f64, NnError> {
    check_frame_dims("l1 loss", gen, gt)?;
    let sum: f64 = gen
        .data()
        .iter()
        .zip(gt.data().iter())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(sum / gen.data().len() as f64)
}

/// Scores both pairs with the frozen discriminator and reduces them to the
/// (d_loss, g_loss) scalars. A logit-headed discriminator is squashed first.
pub fn adversarial_losses<T: Real>(
    d: &DiscriminatorModel<T>,
    real_pair: (&TonemappedFrame<T>, &TonemappedFrame<T>),
    fake_pair: (&TonemappedFrame<T>, &TonemappedFrame<T>),
) -> Result<(f64, f64), NnError> {
    let mut p_real = d.discriminate(real_pair.0, real_pair.1)?.as_f64();
    let mut p_fake = d.discriminate(fake_pair.0, fake_pair.1)?.as_f64();
    if d.config().score_head == ScoreHead::Logit {
        p_real = 1.0 / (1.0 + (-p_real).exp());
        p_fake = 1.0 / (1.0 + (-p_fake).exp());
    }
    let d_loss = -p_real.max(LOG_EPS).ln() - (1.0 - p_fake).max(LOG_EPS).ln();
    let g_loss = -p_fake.max(LOG_EPS).ln();
    Ok((d_loss, g_loss))
}

fn perceptual_losses<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    gen: &TonemappedFrame<T>,
    gt: &TonemappedFrame<T>,
) -> Result<(f64, f64), NnError> {
    check_frame_dims("perceptual loss", gen, gt)?;
    let tape = Tape::new();
    let gen_var = tape.leaf(hwc_to_nchw(&[gen.data()]));
    let gt_var = tape.leaf(hwc_to_nchw(&[gt.data()]));
    let (content, style) = perceptual_terms(&tape, extractor, gen_var, gt_var);
    Ok((tape.scalar(content).as_f64(), tape.scalar(style).as_f64()))
}

/// Per-channel-normalized L1 gap between activated feature maps.
pub fn content_loss<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    gen: &TonemappedFrame<T>,
    gt: &TonemappedFrame<T>,
) -> Result<f64, NnError> {
    Ok(perceptual_losses(extractor, gen, gt)?.0)
}

/// Mean absolute Gram-matrix gap between feature maps.
pub fn style_loss<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    gen: &TonemappedFrame<T>,
    gt: &TonemappedFrame<T>,
) -> Result<f64, NnError> {
    Ok(perceptual_losses(extractor, gen, gt)?.1)
}

/// Root-mean-square gap between the current frame and the flow-warped
/// previous frame.
pub fn temporal_reg<T: Real>(
    cur: &TonemappedFrame<T>,
    prev: &TonemappedFrame<T>,
    flow: &FlowField<T>,
) -> Result<f64, NnError> {
    check_frame_dims("temporal regularization", cur, prev)?;
    let warped = warp_backward(prev.data(), flow)?;
    let sum_sq: f64 = cur
        .data()
        .iter()
        .zip(warped.iter())
        .map(|(c, w)| {
            let d = c.as_f64() - w.as_f64();
            d * d
        })
        .sum();
    Ok((sum_sq / cur.data().len() as f64).sqrt())
}

/// `λ_adv·adv + λ_content·content + λ_style·style + λ_l1·l1`.
pub fn reconstruction_loss(
    weights: &LossWeights,
    adv: f64,
    content: f64,
    style: f64,
    l1: f64,
) -> f64 {
    weights.lambda_adv * adv
        + weights.content_weight() * content
        + weights.lambda_style * style
        + weights.lambda_l1 * l1
}

/// `alpha·rec + (1 − alpha)·reg`.
pub fn total_loss(weights: &LossWeights, rec: f64, reg: f64) -> f64 {
    weights.alpha * rec + (1.0 - weights.alpha) * reg
}
