//! Spectral-normalized convolutional discriminator over frame pairs.
//!
//! Five stride-2 convolutions with leaky-rectifier activations reduce a
//! 6-channel pair (current + previous tonemapped frame) to a feature map,
//! which is pooled and pushed through two dense layers into one scalar per
//! sample. Every weight is divided by its estimated top singular value via
//! power iteration, keeping the function close to 1-Lipschitz.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use hdrvid_core::{Real, TonemappedFrame};

use super::{hwc_to_nchw, Phase};
use crate::error::NnError;
use crate::ops;
use crate::params::{Binding, Initializer, ParamId, ParamSet};
use crate::tape::{Tape, Var};

const LEAKY_SLOPE: f64 = 0.2;

/// Current + previous frame, channel-concatenated.
pub const PAIR_CHANNELS: usize = 6;

/// Five stride-2 convolutions need at least this much extent per axis.
pub const MIN_SPATIAL: usize = 32;

/// Output interpretation of the final dense layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreHead {
    /// Sigmoid-squashed real-pair probability in `(0, 1)`.
    #[default]
    Probability,
    /// Raw score, caller applies its own link.
    Logit,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Fixed at 5; stored so checkpoints record the contract explicitly.
    pub n_conv_layers: usize,
    /// Fixed at 2.
    pub n_dense_layers: usize,
    pub base_channels: usize,
    pub score_head: ScoreHead,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_conv_layers: 5,
            n_dense_layers: 2,
            base_channels: 64,
            score_head: ScoreHead::Probability,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_conv_layers != 5 || self.n_dense_layers != 2 {
            return Err(NnError::Config(format!(
                "discriminator layer counts are fixed at 5 conv + 2 dense, got {} + {}",
                self.n_conv_layers, self.n_dense_layers
            )));
        }
        if self.base_channels < 4 {
            return Err(NnError::Config(format!(
                "discriminator base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Output channels of each convolution stage.
    fn conv_channels(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 8 * b]
    }
}

/// A spectral-normalized layer: weight, bias, and the persistent power-
/// iteration vector (stored as a non-trainable parameter so checkpoints
/// resume with the same singular-value estimate).
struct SnLayer {
    weight: ParamId,
    bias: ParamId,
    u: ParamId,
}

pub struct DiscriminatorModel<T: Real> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    convs: Vec<SnLayer>,
    dense: Vec<SnLayer>,
}

fn add_sn_layer<T: Real>(
    params: &mut ParamSet<T>,
    init: &mut Initializer,
    prefix: &str,
    weight_shape: &[usize],
    fan_in: usize,
    c_out: usize,
) -> Result<SnLayer, NnError> {
    Ok(SnLayer {
        weight: params.add(
            format!("{prefix}.weight"),
            init.he_normal(weight_shape, fan_in),
            true,
        )?,
        bias: params.add(format!("{prefix}.bias"), init.constant(&[c_out], 0.0), true)?,
        // Power iteration runs on the weight viewed as rows x flattened-rest;
        // u matches the row count.
        u: params.add(
            format!("{prefix}.u"),
            init.unit_vector(weight_shape[0]),
            false,
        )?,
    })
}

/// Builds a pair discriminator with deterministic seeded initialization.
pub fn build_discriminator<T: Real>(
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<DiscriminatorModel<T>, NnError> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut params = ParamSet::new();

    let mut convs = Vec::with_capacity(5);
    let mut c_in = PAIR_CHANNELS;
    for (i, c_out) in config.conv_channels().into_iter().enumerate() {
        convs.push(add_sn_layer(
            &mut params,
            &mut init,
            &format!("conv{}", i + 1),
            &[c_out, c_in, 4, 4],
            c_in * 16,
            c_out,
        )?);
        c_in = c_out;
    }

    let hidden = config.base_channels;
    let dense = vec![
        add_sn_layer(&mut params, &mut init, "dense1", &[c_in, hidden], c_in, hidden)?,
        add_sn_layer(&mut params, &mut init, "dense2", &[hidden, 1], hidden, 1)?,
    ];

    Ok(DiscriminatorModel {
        config: config.clone(),
        params,
        convs,
        dense,
    })
}

impl<T: Real> DiscriminatorModel<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Binds one spectral-normalized weight. Training runs a power-iteration
    /// step and records the moved `u`; eval reuses the stored estimate
    /// without touching it.
    fn bind_normalized(
        &self,
        tape: &Tape<T>,
        binding: &mut Binding,
        layer: &SnLayer,
        phase: Phase,
        updates: &mut Vec<(ParamId, ArrayD<T>)>,
    ) -> (Var, Var) {
        let w = binding.bind(tape, &self.params, layer.weight);
        let b = binding.bind(tape, &self.params, layer.bias);
        let mut u = self.params.get(layer.u).clone();
        let iters = match phase {
            Phase::Train => 1,
            Phase::Eval => 0,
        };
        let w_sn = ops::spectral_normalize(tape, w, &mut u, iters);
        if phase == Phase::Train {
            updates.push((layer.u, u));
        }
        (w_sn, b)
    }

    fn forward_impl(
        &self,
        tape: &Tape<T>,
        x: Var,
        phase: Phase,
        updates: &mut Vec<(ParamId, ArrayD<T>)>,
    ) -> (Var, Binding) {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "discriminator forward expects NCHW");
        assert_eq!(shape[1], PAIR_CHANNELS, "discriminator input channels");
        assert!(
            shape[2] >= MIN_SPATIAL && shape[3] >= MIN_SPATIAL,
            "discriminator needs at least {MIN_SPATIAL}x{MIN_SPATIAL} input, got {}x{}",
            shape[2],
            shape[3]
        );

        let mut binding = Binding::new();
        let mut h = x;
        for layer in &self.convs {
            let (w, b) = self.bind_normalized(tape, &mut binding, layer, phase, updates);
            h = ops::conv2d(tape, h, w, Some(b), 2, 1);
            h = ops::leaky_relu(tape, h, T::lit(LEAKY_SLOPE));
        }
        h = ops::spatial_mean(tape, h);

        let (w, b) = self.bind_normalized(tape, &mut binding, &self.dense[0], phase, updates);
        h = ops::dense(tape, h, w, Some(b));
        h = ops::leaky_relu(tape, h, T::lit(LEAKY_SLOPE));

        let (w, b) = self.bind_normalized(tape, &mut binding, &self.dense[1], phase, updates);
        h = ops::dense(tape, h, w, Some(b));

        let score = match self.config.score_head {
            ScoreHead::Probability => ops::sigmoid(tape, h),
            ScoreHead::Logit => h,
        };
        (score, binding)
    }

    /// Training forward on an `[N, 6, H, W]` batch; returns `[N, 1]` scores.
    /// Each call advances every layer's power iteration by one step.
    pub fn train_forward(&mut self, tape: &Tape<T>, x: Var) -> (Var, Binding) {
        let mut updates = Vec::new();
        let (out, binding) = self.forward_impl(tape, x, Phase::Train, &mut updates);
        for (id, value) in updates {
            self.params
                .assign(id, value)
                .expect("power-iteration vectors keep their shape");
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

    /// Scores one (current, previous) tonemapped pair with the frozen model.
    pub fn discriminate(
        &self,
        current: &TonemappedFrame<T>,
        previous: &TonemappedFrame<T>,
    ) -> Result<T, NnError> {
        let input = pair_input(current, previous)?;
        let shape = input.shape().to_vec();
        if shape[2] < MIN_SPATIAL || shape[3] < MIN_SPATIAL {
            return Err(NnError::Config(format!(
                "discriminator input must be at least {MIN_SPATIAL}x{MIN_SPATIAL}, \
                 got {}x{}",
                shape[2], shape[3]
            )));
        }
        let tape = Tape::new();
        let x = tape.leaf(input);
        let score = self.eval_forward(&tape, x);
        Ok(tape.value(score)[[0, 0]])
    }

    /// True top singular value of each layer's *normalized* weight, measured
    /// by a long fresh power iteration — the 1-Lipschitz health check. Values
    /// should sit near 1 once the persistent `u` estimates have converged.
    pub fn normalized_weight_sigmas(&self, refine_iters: usize) -> Vec<(String, T)> {
        self.convs
            .iter()
            .chain(&self.dense)
            .map(|layer| {
                let tape = Tape::new();
                let w = tape.leaf(self.params.get(layer.weight).clone());
                let mut u = self.params.get(layer.u).clone();
                let w_sn = ops::spectral_normalize(&tape, w, &mut u, 0);
                let normalized = tape.value(w_sn);
                let mut probe = Initializer::new(0x5150).unit_vector(normalized.shape()[0]);
                let sigma = ops::power_iteration_sigma(&normalized, &mut probe, refine_iters);
                (self.params.name(layer.weight).to_string(), sigma)
            })
            .collect()
    }
}

/// Stacks a (current, previous) tonemapped pair into the `[1, 6, H, W]`
/// discriminator input layout.
pub fn pair_input<T: Real>(
    current: &TonemappedFrame<T>,
    previous: &TonemappedFrame<T>,
) -> Result<ArrayD<T>, NnError> {
    let (ch, cw, _) = current.data().dim();
    let (ph, pw, pc) = previous.data().dim();
    if (ch, cw) != (ph, pw) {
        return Err(NnError::ShapeMismatch {
            context: "discriminator pair",
            expected: vec![ch, cw, 3],
            got: vec![ph, pw, pc],
        });
    }
    let planes = hwc_to_nchw(&[current.data(), previous.data()]);
    Ok(planes
        .into_shape_with_order(IxDyn(&[1, PAIR_CHANNELS, ch, cw]))
        .expect("2x3 planes regroup into 6 channels"))
}
