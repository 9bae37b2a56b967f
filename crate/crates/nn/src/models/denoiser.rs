//! Per-exposure self-supervised denoiser.
//!
//! An encoder–decoder with skip connections: each encoder level is
//! conv + batch norm + ReLU followed by 2×2 max pooling, the decoder mirrors
//! it with 2×2 stride-2 deconvolutions, and the head clamps to `[0, 1]`. Two
//! instances exist per trained pipeline, one per exposure role; they share
//! the architecture but never parameters.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use hdrvid_core::{LdrFrame, Real};

use super::{hwc_to_nchw, nchw_sample_to_hwc, pad_to_multiple, ExposureRole, Phase};
use crate::error::NnError;
use crate::ops;
use crate::params::{Binding, Initializer, ParamId, ParamSet};
use crate::tape::{Tape, Var};

pub const INPUT_CHANNELS: usize = 3;
pub const OUTPUT_CHANNELS: usize = 3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Number of pooling levels; the input is padded to a multiple of
    /// `2^depth`.
    pub depth: usize,
    /// Channels at the first encoder level; each level doubles.
    pub base_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.depth < 1 {
            return Err(NnError::Config(format!(
                "denoiser depth must be at least 1, got {}",
                self.depth
            )));
        }
        if self.base_channels < 8 {
            return Err(NnError::Config(format!(
                "denoiser base_channels must be at least 8, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input spatial dims must be divisible by this (after padding).
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

struct ConvBn {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

struct DecoderLevel {
    deconv_weight: ParamId,
    deconv_bias: ParamId,
    fuse: ConvBn,
}

pub struct DenoiserModel<T: Real> {
    config: DenoiserConfig,
    role: ExposureRole,
    params: ParamSet<T>,
    encoder: Vec<ConvBn>,
    bottleneck: ConvBn,
    decoder: Vec<DecoderLevel>, // deepest level first
    head_weight: ParamId,
    head_bias: ParamId,
}

fn add_conv_bn<T: Real>(
    params: &mut ParamSet<T>,
    init: &mut Initializer,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Result<ConvBn, NnError> {
    let fan_in = c_in * kernel * kernel;
    Ok(ConvBn {
        weight: params.add(
            format!("{prefix}.conv.weight"),
            init.he_normal(&[c_out, c_in, kernel, kernel], fan_in),
            true,
        )?,
        bias: params.add(
            format!("{prefix}.conv.bias"),
            init.constant(&[c_out], 0.0),
            true,
        )?,
        gamma: params.add(
            format!("{prefix}.bn.gamma"),
            init.constant(&[c_out], 1.0),
            true,
        )?,
        beta: params.add(
            format!("{prefix}.bn.beta"),
            init.constant(&[c_out], 0.0),
            true,
        )?,
        running_mean: params.add(
            format!("{prefix}.bn.running_mean"),
            init.constant(&[c_out], 0.0),
            false,
        )?,
        running_var: params.add(
            format!("{prefix}.bn.running_var"),
            init.constant(&[c_out], 1.0),
            false,
        )?,
    })
}

/// Builds a denoiser with deterministic seeded initialization.
pub fn build_denoiser<T: Real>(
    config: &DenoiserConfig,
    role: ExposureRole,
    seed: u64,
) -> Result<DenoiserModel<T>, NnError> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut params = ParamSet::new();

    let mut encoder = Vec::with_capacity(config.depth);
    let mut c_prev = INPUT_CHANNELS;
    for level in 0..config.depth {
        let c = config.channels(level);
        encoder.push(add_conv_bn(
            &mut params,
            &mut init,
            &format!("enc{level}"),
            c_prev,
            c,
            3,
        )?);
        c_prev = c;
    }

    let bottleneck = add_conv_bn(&mut params, &mut init, "bottleneck", c_prev, c_prev, 3)?;

    let mut decoder = Vec::with_capacity(config.depth);
    let mut c_up = c_prev;
    for level in (0..config.depth).rev() {
        let c = config.channels(level);
        let deconv_weight = params.add(
            format!("dec{level}.deconv.weight"),
            init.he_normal(&[c_up, c, 2, 2], c_up * 4),
            true,
        )?;
        let deconv_bias = params.add(
            format!("dec{level}.deconv.bias"),
            init.constant(&[c], 0.0),
            true,
        )?;
        // After concatenating the skip the fuse conv sees 2c channels.
        let fuse = add_conv_bn(
            &mut params,
            &mut init,
            &format!("dec{level}.fuse"),
            2 * c,
            c,
            3,
        )?;
        decoder.push(DecoderLevel {
            deconv_weight,
            deconv_bias,
            fuse,
        });
        c_up = c;
    }

    // Head bias starts mid-range so the output clamp is in its active region
    // from the first step; a zero init would leave half the pixels pinned
    // at the clamp boundary with no gradient.
    let head_weight = params.add(
        "head.weight",
        init.he_normal(&[OUTPUT_CHANNELS, c_up, 3, 3], c_up * 9),
        true,
    )?;
    let head_bias = params.add("head.bias", init.constant(&[OUTPUT_CHANNELS], 0.5), true)?;

    Ok(DenoiserModel {
        config: config.clone(),
        role,
        params,
        encoder,
        bottleneck,
        decoder,
        head_weight,
        head_bias,
    })
}

impl<T: Real> DenoiserModel<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn role(&self) -> ExposureRole {
        self.role
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn conv_bn_relu(
        &self,
        tape: &Tape<T>,
        binding: &mut Binding,
        layer: &ConvBn,
        x: Var,
        phase: Phase,
        updates: &mut Vec<(ParamId, ArrayD<T>)>,
    ) -> Var {
        let w = binding.bind(tape, &self.params, layer.weight);
        let b = binding.bind(tape, &self.params, layer.bias);
        let gamma = binding.bind(tape, &self.params, layer.gamma);
        let beta = binding.bind(tape, &self.params, layer.beta);
        let x = ops::conv2d(tape, x, w, Some(b), 1, 1);
        let mut rm = self.params.get(layer.running_mean).clone();
        let mut rv = self.params.get(layer.running_var).clone();
        let mode = match phase {
            Phase::Train => ops::BatchNormMode::Train,
            Phase::Eval => ops::BatchNormMode::Eval,
        };
        let x = ops::batchnorm2d(
            tape,
            x,
            gamma,
            beta,
            &mut rm,
            &mut rv,
            T::lit(BN_MOMENTUM),
            T::lit(BN_EPS),
            mode,
        );
        if phase == Phase::Train {
            updates.push((layer.running_mean, rm));
            updates.push((layer.running_var, rv));
        }
        ops::relu(tape, x)
    }

    fn forward_impl(
        &self,
        tape: &Tape<T>,
        x: Var,
        phase: Phase,
        updates: &mut Vec<(ParamId, ArrayD<T>)>,
    ) -> (Var, Binding) {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "denoiser forward expects NCHW");
        assert_eq!(shape[1], INPUT_CHANNELS, "denoiser input channels");
        let multiple = self.config.spatial_multiple();
        assert!(
            shape[2] % multiple == 0 && shape[3] % multiple == 0,
            "denoiser forward needs dims divisible by {multiple}; pad first"
        );

        let mut binding = Binding::new();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for layer in &self.encoder {
            let activated = self.conv_bn_relu(tape, &mut binding, layer, h, phase, updates);
            skips.push(activated);
            h = ops::maxpool2(tape, activated);
        }
        h = self.conv_bn_relu(tape, &mut binding, &self.bottleneck, h, phase, updates);
        for (stage, level) in self.decoder.iter().enumerate() {
            let dw = binding.bind(tape, &self.params, level.deconv_weight);
            let db = binding.bind(tape, &self.params, level.deconv_bias);
            h = ops::conv_transpose2d(tape, h, dw, Some(db), 2, 0);
            let skip = skips[self.config.depth - 1 - stage];
            h = ops::concat_channels(tape, &[h, skip]);
            h = self.conv_bn_relu(tape, &mut binding, &level.fuse, h, phase, updates);
        }
        let hw = binding.bind(tape, &self.params, self.head_weight);
        let hb = binding.bind(tape, &self.params, self.head_bias);
        let out = ops::conv2d(tape, h, hw, Some(hb), 1, 1);
        (ops::clamp01(tape, out), binding)
    }

    /// Training forward on an NCHW batch (dims already divisible by
    /// `2^depth`). Batch-norm running statistics update as a side effect.
    pub fn train_forward(&mut self, tape: &Tape<T>, x: Var) -> (Var, Binding) {
        let mut updates = Vec::new();
        let (out, binding) = self.forward_impl(tape, x, Phase::Train, &mut updates);
        for (id, value) in updates {
            self.params
                .assign(id, value)
                .expect("running stats keep their shape");
        }
        (out, binding)
    }

    /// Frozen forward: no state is touched, safe on a shared reference.
    pub fn eval_forward(&self, tape: &Tape<T>, x: Var) -> Var {
        let mut updates = Vec::new();
        let (out, _) = self.forward_impl(tape, x, Phase::Eval, &mut updates);
        debug_assert!(updates.is_empty());
        out
    }

    /// Denoises one frame. The frame's schedule index must match this
    /// model's exposure role; arbitrary sizes are handled by reflect-padding
    /// to the next `2^depth` multiple and cropping back.
    pub fn denoise(&self, noisy: &LdrFrame<T>) -> Result<LdrFrame<T>, NnError> {
        if !self.role.matches_index(noisy.exposure_index()) {
            return Err(NnError::RoleMismatch {
                role: self.role.as_str(),
                index: noisy.exposure_index(),
            });
        }
        let (h, w) = (noisy.height(), noisy.width());
        let (pad_h, pad_w) = pad_to_multiple(h, w, self.config.spatial_multiple())?;
        let tape = Tape::new();
        let x = tape.leaf(hwc_to_nchw(&[noisy.data()]));
        let x = ops::pad_reflect(&tape, x, 0, pad_h, 0, pad_w);
        let out = self.eval_forward(&tape, x);
        let out = ops::crop_spatial(&tape, out, 0, 0, h, w);
        let data = nchw_sample_to_hwc(&tape.value(out), 0);
        Ok(noisy.with_data(data)?)
    }
}

/// Mean absolute error between a prediction and its clean target — the
/// denoiser training objective, exposed at frame level for evaluation.
pub fn denoiser_loss<T: Real>(pred: &LdrFrame<T>, clean: &LdrFrame<T>) -> Result<f64, NnError> {
    let (p, c) = (pred.data(), clean.data());
    if p.dim() != c.dim() {
        let (ph, pw, pc) = p.dim();
        let (ch, cw, cc) = c.dim();
        return Err(NnError::ShapeMismatch {
            context: "denoiser loss",
            expected: vec![ch, cw, cc],
            got: vec![ph, pw, pc],
        });
    }
    let sum: f64 = p
        .iter()
        .zip(c.iter())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(sum / p.len() as f64)
}
