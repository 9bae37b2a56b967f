//! Frozen feature extractors for perceptual losses.
//!
//! The perceptual terms compare activated feature maps of the generated and
//! ground-truth frames. Any frozen, deterministic map satisfying
//! [`FeatureExtractor`] works — the loss math is extractor-agnostic. Two
//! implementations ship here: a pointwise identity (the oracle everything
//! else is checked against) and a seeded random convolutional stack, which
//! keeps the whole pipeline free of pretrained assets while still measuring
//! multi-channel structure.

use crate::ops;
use crate::params::{Initializer, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use hdrvid_core::Real;

/// A frozen map from an NCHW batch to a stack of activated feature maps.
///
/// Implementations must be deterministic: the same input yields the same
/// features on every call. Gradients flow through the features to the input,
/// never into the extractor.
pub trait FeatureExtractor<T: Real> {
    /// Feature maps for the batch at `x`, shallowest first.
    fn features(&self, tape: &Tape<T>, x: Var) -> Vec<Var>;

    /// Channel count of each map in [`features`](Self::features) order.
    fn layer_channels(&self) -> &[usize];

    fn name(&self) -> &str;
}

/// The input itself as the single feature map. Reduces the perceptual terms
/// to plain pixel losses, which makes it the reference point for oracles.
pub struct IdentityExtractor {
    channels: [usize; 1],
}

impl IdentityExtractor {
    pub fn new(input_channels: usize) -> Self {
        Self {
            channels: [input_channels],
        }
    }
}

impl Default for IdentityExtractor {
    fn default() -> Self {
        Self::new(3)
    }
}

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, tape: &Tape<T>, x: Var) -> Vec<Var> {
        assert_eq!(
            tape.value(x).shape()[1],
            self.channels[0],
            "identity extractor channel count"
        );
        vec![x]
    }

    fn layer_channels(&self) -> &[usize] {
        &self.channels
    }

    fn name(&self) -> &str {
        "identity"
    }
}

/// Widths of the five convolutional stages.
const RANDOM_CONV_WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];

/// Five seeded random 3×3 convolutions with ReLU, no pooling.
///
/// Random convolutional features preserve enough structure to distinguish
/// textures and edges, and being seeded they are hermetic: no downloaded
/// weights, bit-reproducible everywhere.
pub struct RandomConvExtractor<T: Real> {
    params: ParamSet<T>,
    layers: Vec<(ParamId, ParamId)>,
    channels: Vec<usize>,
    input_channels: usize,
}

impl<T: Real> RandomConvExtractor<T> {
    pub fn new(input_channels: usize, seed: u64) -> Self {
        assert!(input_channels > 0);
        let mut init = Initializer::new(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(RANDOM_CONV_WIDTHS.len());
        let mut c_in = input_channels;
        for (i, &c_out) in RANDOM_CONV_WIDTHS.iter().enumerate() {
            let weight = params
                .add(
                    format!("layer{i}.weight"),
                    init.he_normal(&[c_out, c_in, 3, 3], c_in * 9),
                    false,
                )
                .expect("distinct layer names");
            let bias = params
                .add(format!("layer{i}.bias"), init.constant(&[c_out], 0.0), false)
                .expect("distinct layer names");
            layers.push((weight, bias));
            c_in = c_out;
        }
        Self {
            params,
            layers,
            channels: RANDOM_CONV_WIDTHS.to_vec(),
            input_channels,
        }
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, tape: &Tape<T>, x: Var) -> Vec<Var> {
        assert_eq!(
            tape.value(x).shape()[1],
            self.input_channels,
            "random-conv extractor channel count"
        );
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (weight, bias) in &self.layers {
            // Weights enter as plain constants: frozen by construction.
            let w = tape.leaf(self.params.get(*weight).clone());
            let b = tape.leaf(self.params.get(*bias).clone());
            h = ops::conv2d(tape, h, w, Some(b), 1, 1);
            h = ops::relu(tape, h);
            maps.push(h);
        }
        maps
    }

    fn layer_channels(&self) -> &[usize] {
        &self.channels
    }

    fn name(&self) -> &str {
        "random-conv"
    }
}
