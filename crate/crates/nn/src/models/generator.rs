//! Encoder–ResBlock–decoder merge generator.
//!
//! The encoder downsamples twice (H×W → H/4×W/4), the bottleneck runs a
//! chain of residual blocks at constant width, and the decoder mirrors the
//! encoder with stride-2 deconvolutions. Every basic unit is
//! convolution + instance norm + ReLU; the head squashes to `[0, 1]` with a
//! sigmoid so the output lives in the tonemapped domain.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use hdrvid_core::frame::DEFAULT_MU;
use hdrvid_core::radiometry::linearize_ldr;
use hdrvid_core::{LdrFrame, Real, TonemappedFrame};

use super::{hwc_to_nchw, nchw_sample_to_hwc, pad_to_multiple};
use crate::error::NnError;
use crate::ops;
use crate::params::{Binding, Initializer, ParamId, ParamSet};
use crate::tape::{Tape, Var};

const IN_EPS: f64 = 1e-5;

/// Channel layout `generate` assembles: reference LDR, aligned neighbor LDR,
/// and the linearized (exposure-divided) counterparts of both.
pub const MERGE_INPUT_CHANNELS: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    /// Width after the stem; doubles at each of the two encoder strides.
    pub base_channels: usize,
    pub n_resblocks: usize,
    /// Product of the encoder strides. Fixed at 4 (two stride-2 stages); the
    /// field exists so checkpoints record the contract explicitly.
    pub downsample_factor: usize,
    pub output_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: MERGE_INPUT_CHANNELS,
            base_channels: 64,
            n_resblocks: 8,
            downsample_factor: 4,
            output_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(NnError::Config(
                "generator channel counts must be positive".into(),
            ));
        }
        if self.base_channels < 4 {
            return Err(NnError::Config(format!(
                "generator base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if self.n_resblocks < 1 {
            return Err(NnError::Config(format!(
                "generator needs at least one residual block, got {}",
                self.n_resblocks
            )));
        }
        if self.downsample_factor != 4 {
            return Err(NnError::Config(format!(
                "two stride-2 encoder stages fix the downsample factor at 4, got {}",
                self.downsample_factor
            )));
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this (after padding).
    pub fn spatial_multiple(&self) -> usize {
        self.downsample_factor
    }
}

/// One basic unit: a (de)convolution followed by instance norm and ReLU.
struct Unit {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

pub struct GeneratorModel<T: Real> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    stem: Unit,
    down: [Unit; 2],
    res: Vec<(Unit, Unit)>,
    up: [Unit; 2],
    head_weight: ParamId,
    head_bias: ParamId,
}

/// What the forward pass actually did, for architecture checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorTrace {
    /// Spatial dims at the residual chain (encoder output).
    pub bottleneck_hw: (usize, usize),
    pub resblocks_applied: usize,
}

fn add_unit<T: Real>(
    params: &mut ParamSet<T>,
    init: &mut Initializer,
    prefix: &str,
    shape: &[usize; 4],
    c_in: usize,
    c_out: usize,
) -> Result<Unit, NnError> {
    // Conv and deconv weights differ only in axis order; the receptive-field
    // fan-in c_in * k * k drives the scale either way.
    let fan_in = c_in * shape[2] * shape[3];
    Ok(Unit {
        weight: params.add(
            format!("{prefix}.conv.weight"),
            init.he_normal(shape, fan_in),
            true,
        )?,
        bias: params.add(format!("{prefix}.conv.bias"), init.constant(&[c_out], 0.0), true)?,
        gamma: params.add(format!("{prefix}.in.gamma"), init.constant(&[c_out], 1.0), true)?,
        beta: params.add(format!("{prefix}.in.beta"), init.constant(&[c_out], 0.0), true)?,
    })
}

fn add_conv_unit<T: Real>(
    params: &mut ParamSet<T>,
    init: &mut Initializer,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Result<Unit, NnError> {
    add_unit(params, init, prefix, &[c_out, c_in, kernel, kernel], c_in, c_out)
}

fn add_deconv_unit<T: Real>(
    params: &mut ParamSet<T>,
    init: &mut Initializer,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Result<Unit, NnError> {
    add_unit(params, init, prefix, &[c_in, c_out, kernel, kernel], c_in, c_out)
}

/// Builds a merge generator with deterministic seeded initialization.
pub fn build_generator<T: Real>(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<GeneratorModel<T>, NnError> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut params = ParamSet::new();
    let b = config.base_channels;

    let stem = add_conv_unit(&mut params, &mut init, "stem", config.input_channels, b, 7)?;
    let down = [
        add_conv_unit(&mut params, &mut init, "down1", b, 2 * b, 3)?,
        add_conv_unit(&mut params, &mut init, "down2", 2 * b, 4 * b, 3)?,
    ];
    let mut res = Vec::with_capacity(config.n_resblocks);
    for i in 0..config.n_resblocks {
        res.push((
            add_conv_unit(&mut params, &mut init, &format!("res{i}.a"), 4 * b, 4 * b, 3)?,
            add_conv_unit(&mut params, &mut init, &format!("res{i}.b"), 4 * b, 4 * b, 3)?,
        ));
    }
    let up = [
        add_deconv_unit(&mut params, &mut init, "up1", 4 * b, 2 * b, 4)?,
        add_deconv_unit(&mut params, &mut init, "up2", 2 * b, b, 4)?,
    ];
    let head_weight = params.add(
        "head.weight",
        init.he_normal(&[config.output_channels, b, 7, 7], b * 49),
        true,
    )?;
    // Zero bias puts the sigmoid at 0.5 — mid-range, maximal gradient.
    let head_bias = params.add("head.bias", init.constant(&[config.output_channels], 0.0), true)?;

    Ok(GeneratorModel {
        config: config.clone(),
        params,
        stem,
        down,
        res,
        up,
        head_weight,
        head_bias,
    })
}

impl<T: Real> GeneratorModel<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn unit(
        &self,
        tape: &Tape<T>,
        binding: &mut Binding,
        unit: &Unit,
        x: Var,
        conv: impl FnOnce(&Tape<T>, Var, Var, Var) -> Var,
    ) -> Var {
        let w = binding.bind(tape, &self.params, unit.weight);
        let b = binding.bind(tape, &self.params, unit.bias);
        let gamma = binding.bind(tape, &self.params, unit.gamma);
        let beta = binding.bind(tape, &self.params, unit.beta);
        let x = conv(tape, x, w, b);
        let x = ops::instancenorm2d(tape, x, gamma, beta, T::lit(IN_EPS));
        ops::relu(tape, x)
    }

    fn conv_unit(&self, tape: &Tape<T>, binding: &mut Binding, u: &Unit, x: Var, stride: usize, pad: usize) -> Var {
        self.unit(tape, binding, u, x, |t, x, w, b| {
            ops::conv2d(t, x, w, Some(b), stride, pad)
        })
    }

    fn deconv_unit(&self, tape: &Tape<T>, binding: &mut Binding, u: &Unit, x: Var) -> Var {
        self.unit(tape, binding, u, x, |t, x, w, b| {
            ops::conv_transpose2d(t, x, w, Some(b), 2, 1)
        })
    }

    /// Forward on an NCHW batch whose dims are already divisible by 4.
    /// Instance norm carries no cross-batch state, so the same code path
    /// serves training and inference.
    pub fn forward(&self, tape: &Tape<T>, x: Var) -> (Var, Binding, GeneratorTrace) {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "generator forward expects NCHW");
        assert_eq!(shape[1], self.config.input_channels, "generator input channels");
        let multiple = self.config.spatial_multiple();
        assert!(
            shape[2] % multiple == 0 && shape[3] % multiple == 0,
            "generator forward needs dims divisible by {multiple}; pad first"
        );

        let mut binding = Binding::new();
        let mut h = self.conv_unit(tape, &mut binding, &self.stem, x, 1, 3);
        h = self.conv_unit(tape, &mut binding, &self.down[0], h, 2, 1);
        h = self.conv_unit(tape, &mut binding, &self.down[1], h, 2, 1);

        let bshape = tape.value(h).shape().to_vec();
        let trace = GeneratorTrace {
            bottleneck_hw: (bshape[2], bshape[3]),
            resblocks_applied: self.res.len(),
        };

        for (a, bu) in &self.res {
            let inner = self.conv_unit(tape, &mut binding, a, h, 1, 1);
            let inner = self.conv_unit(tape, &mut binding, bu, inner, 1, 1);
            h = ops::add(tape, h, inner);
        }

        h = self.deconv_unit(tape, &mut binding, &self.up[0], h);
        h = self.deconv_unit(tape, &mut binding, &self.up[1], h);

        let hw = binding.bind(tape, &self.params, self.head_weight);
        let hb = binding.bind(tape, &self.params, self.head_bias);
        let out = ops::conv2d(tape, h, hw, Some(hb), 1, 3);
        (ops::sigmoid(tape, out), binding, trace)
    }

    /// Assembles the 12-channel merge input for one reference/neighbor pair:
    /// both LDRs plus their linearized radiance estimates, stacked NCHW.
    pub fn merge_input(
        &self,
        reference: &LdrFrame<T>,
        aligned_neighbor: &LdrFrame<T>,
    ) -> Result<ArrayD<T>, NnError> {
        if self.config.input_channels != MERGE_INPUT_CHANNELS {
            return Err(NnError::Config(format!(
                "frame-level merge needs the {MERGE_INPUT_CHANNELS}-channel input layout, \
                 model is configured for {}",
                self.config.input_channels
            )));
        }
        let (rh, rw, _) = reference.data().dim();
        let (nh, nw, nc) = aligned_neighbor.data().dim();
        if (rh, rw) != (nh, nw) {
            return Err(NnError::ShapeMismatch {
                context: "merge input pair",
                expected: vec![rh, rw, 3],
                got: vec![nh, nw, nc],
            });
        }
        if reference.exposure_time() == aligned_neighbor.exposure_time() {
            return Err(NnError::SameExposure(reference.exposure_time().as_f64()));
        }
        let ref_lin = linearize_ldr(reference);
        let nbr_lin = linearize_ldr(aligned_neighbor);
        let planes = hwc_to_nchw(&[
            reference.data(),
            aligned_neighbor.data(),
            ref_lin.data(),
            nbr_lin.data(),
        ]);
        // Stacked as 4 samples × 3 channels; regroup into 1 sample × 12.
        Ok(planes
            .into_shape_with_order(ndarray::IxDyn(&[1, MERGE_INPUT_CHANNELS, rh, rw]))
            .expect("4x3 planes regroup into 12 channels"))
    }

    /// Merges a reference frame with its aligned alternating-exposure
    /// neighbor into a tonemapped HDR frame. Arbitrary sizes are handled by
    /// reflect-padding to the next multiple of 4 and cropping back.
    pub fn generate(
        &self,
        reference: &LdrFrame<T>,
        aligned_neighbor: &LdrFrame<T>,
    ) -> Result<TonemappedFrame<T>, NnError> {
        let input = self.merge_input(reference, aligned_neighbor)?;
        let (h, w) = (reference.height(), reference.width());
        let (pad_h, pad_w) = pad_to_multiple(h, w, self.config.spatial_multiple())?;
        let tape = Tape::new();
        let x = tape.leaf(input);
        let x = ops::pad_reflect(&tape, x, 0, pad_h, 0, pad_w);
        let (out, _, _) = self.forward(&tape, x);
        let out = ops::crop_spatial(&tape, out, 0, 0, h, w);
        let data = nchw_sample_to_hwc(&tape.value(out), 0);
        Ok(TonemappedFrame::new(data, T::lit(DEFAULT_MU))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 8,
            n_resblocks: 2,
            ..GeneratorConfig::default()
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |_| rng.random_range(0.0..1.0))
    }

    fn random_ldr(rng: &mut ChaCha8Rng, h: usize, w: usize, t: f64, index: usize) -> LdrFrame<f64> {
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0));
        LdrFrame::new(data, t, index, 2.2).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad = GeneratorConfig {
            downsample_factor: 2,
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig {
            n_resblocks: 0,
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = build_generator::<f64>(&tiny_config(), 7).unwrap();
        let b = build_generator::<f64>(&tiny_config(), 7).unwrap();
        assert_eq!(a.params().digest(), b.params().digest());
        let c = build_generator::<f64>(&tiny_config(), 8).unwrap();
        assert_ne!(a.params().digest(), c.params().digest());
    }

    #[test]
    fn parameter_count_matches_layer_table() {
        // Independent arithmetic for base 8, 2 res-blocks, 12 -> 3 channels.
        // Each unit adds conv w+b plus instance-norm gamma+beta.
        let stem = 8 * 12 * 49 + 8 + 2 * 8;
        let down1 = 16 * 8 * 9 + 16 + 2 * 16;
        let down2 = 32 * 16 * 9 + 32 + 2 * 32;
        let res_unit = 32 * 32 * 9 + 32 + 2 * 32;
        let up1 = 32 * 16 * 16 + 16 + 2 * 16; // deconv 32 -> 16, 4x4
        let up2 = 16 * 8 * 16 + 8 + 2 * 8;
        let head = 3 * 8 * 49 + 3;
        let expected = stem + down1 + down2 + 4 * res_unit + up1 + up2 + head;

        let model = build_generator::<f64>(&tiny_config(), 0).unwrap();
        assert_eq!(model.params().num_trainable_scalars(), expected);
        assert_eq!(model.params().num_scalars(), expected); // no hidden state
    }

    #[test]
    fn bottleneck_is_quarter_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = build_generator::<f64>(&tiny_config(), 3).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(random_batch(&mut rng, 12, 64, 64));
        let (out, _, trace) = model.forward(&tape, x);
        assert_eq!(trace.bottleneck_hw, (16, 16));
        assert_eq!(trace.resblocks_applied, 2);
        assert_eq!(tape.value(out).shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = build_generator::<f64>(&tiny_config(), 4).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(random_batch(&mut rng, 12, 16, 16));
        let (out, _, _) = model.forward(&tape, x);
        assert!(tape.value(out).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generate_preserves_dims_and_pads_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = build_generator::<f64>(&tiny_config(), 5).unwrap();
        for (h, w) in [(16, 16), (30, 46)] {
            let reference = random_ldr(&mut rng, h, w, 1.0, 0);
            let neighbor = random_ldr(&mut rng, h, w, 8.0, 1);
            let merged = model.generate(&reference, &neighbor).unwrap();
            assert_eq!(merged.data().dim(), (h, w, 3));
            assert_eq!(merged.mu(), DEFAULT_MU);
        }
    }

    #[test]
    fn generate_rejects_bad_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let model = build_generator::<f64>(&tiny_config(), 6).unwrap();
        let reference = random_ldr(&mut rng, 16, 16, 1.0, 0);

        let same_exposure = random_ldr(&mut rng, 16, 16, 1.0, 1);
        assert!(matches!(
            model.generate(&reference, &same_exposure),
            Err(NnError::SameExposure(_))
        ));

        let wrong_size = random_ldr(&mut rng, 16, 20, 8.0, 1);
        assert!(matches!(
            model.generate(&reference, &wrong_size),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn merge_input_layout_is_ldr_pair_then_linearized_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let model = build_generator::<f64>(&tiny_config(), 7).unwrap();
        let reference = random_ldr(&mut rng, 8, 8, 1.0, 0);
        let neighbor = random_ldr(&mut rng, 8, 8, 8.0, 1);
        let input = model.merge_input(&reference, &neighbor).unwrap();
        assert_eq!(input.shape(), &[1, 12, 8, 8]);
        assert_eq!(input[[0, 0, 2, 3]], reference.data()[[2, 3, 0]]);
        assert_eq!(input[[0, 4, 2, 3]], neighbor.data()[[2, 3, 1]]);
        // Channel 6 holds the linearized reference: L^gamma / t with t = 1.
        let l = reference.data()[[2, 3, 0]];
        assert!((input[[0, 6, 2, 3]] - l.powf(2.2)).abs() < 1e-12);
        // Channel 9 holds the linearized neighbor at t = 8.
        let l = neighbor.data()[[2, 3, 0]];
        assert!((input[[0, 9, 2, 3]] - l.powf(2.2) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_flow_to_inputs_and_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let config = GeneratorConfig {
            base_channels: 4,
            n_resblocks: 1,
            ..GeneratorConfig::default()
        };
        let model = build_generator::<f64>(&config, 9).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(random_batch(&mut rng, 12, 8, 8));
        let (out, binding, _) = model.forward(&tape, x);
        let root = ops::mean_all(&tape, out);
        let grads = tape.backward(root);

        let dx = grads.wrt(x).expect("input gradient");
        assert!(dx.iter().all(|g| g.is_finite()));
        for (id, var) in binding.pairs() {
            let g = grads.wrt(*var).unwrap_or_else(|| {
                panic!("no gradient for {}", model.params().name(*id))
            });
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }
}
