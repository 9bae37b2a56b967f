//! Named parameter storage shared by all models.
//!
//! A [`ParamSet`] owns every tensor of a model in insertion order: weights
//! and biases (trainable) as well as persistent state like batch-norm running
//! statistics and spectral-norm power-iteration vectors (not trainable, but
//! checkpointed). Insertion order is the serialization order, so two models
//! built by the same code produce byte-identical checkpoints and digests.
//!
//! Initialization draws in f64 and casts to the working scalar, which makes
//! an f32 and an f64 run of the same seed start from the same numbers.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use hdrvid_core::Real;

use crate::error::NnError;
use crate::tape::{Gradients, Tape, Var};

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

struct Param<T: Real> {
    name: String,
    value: ArrayD<T>,
    trainable: bool,
}

pub struct ParamSet<T: Real> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: ArrayD<T>,
        trainable: bool,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam { name });
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Overwrites a tensor, enforcing the registered shape.
    pub fn assign(&mut self, id: ParamId, value: ArrayD<T>) -> Result<(), NnError> {
        let current = &self.params[id.0].value;
        if current.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                context: "parameter assignment",
                expected: current.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Parameters in registration order as `(id, name, value, trainable)`.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<T>, bool)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value, p.trainable))
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across trainable tensors — the "parameter count"
    /// quoted for a model.
    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Total scalar count including persistent state tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes, flags and values (as f64 little-endian),
    /// in registration order. Two sets digest equal iff they would behave
    /// identically, regardless of the working scalar's width. Used to verify
    /// that frozen stages stay frozen.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update((p.name.len() as u64).to_le_bytes());
            hasher.update(p.name.as_bytes());
            hasher.update((p.value.ndim() as u64).to_le_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update([p.trainable as u8]);
            for v in p.value.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(out, "{byte:02x}").expect("writing to a String");
        }
        out
    }
}

/// Records which tape leaf each parameter was bound to during a forward pass,
/// so the optimizer can route gradients back to the set.
#[derive(Default)]
pub struct Binding {
    pairs: Vec<(ParamId, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a leaf for the parameter's current value and remembers the
    /// association. Binding the same parameter twice in one pass would split
    /// its gradient across two leaves, so it is rejected.
    pub fn bind<T: Real>(&mut self, tape: &Tape<T>, params: &ParamSet<T>, id: ParamId) -> Var {
        debug_assert!(
            self.pairs.iter().all(|&(bound, _)| bound != id),
            "parameter bound twice in one forward pass"
        );
        let var = tape.leaf(params.get(id).clone());
        self.pairs.push((id, var));
        var
    }

    pub fn pairs(&self) -> &[(ParamId, Var)] {
        &self.pairs
    }

    /// Extracts the gradient per bound parameter after a backward sweep.
    /// Parameters the loss never touched get zeros (e.g. a decoder branch
    /// that a particular loss term bypasses).
    pub fn gradients<T: Real>(
        &self,
        params: &ParamSet<T>,
        grads: &Gradients<T>,
    ) -> Vec<(ParamId, ArrayD<T>)> {
        self.pairs
            .iter()
            .map(|&(id, var)| (id, grads.wrt_or_zeros(var, params.get(id).shape())))
            .collect()
    }
}

/// Seeded weight initialization. All draws happen in f64; the working scalar
/// only sees the cast result.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He/Kaiming normal: `N(0, sqrt(2 / fan_in))`, the standard choice in
    /// front of ReLU-family activations.
    pub fn he_normal<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<T> {
        assert!(fan_in > 0, "fan_in must be positive");
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(shape, std)
    }

    /// Zero-mean Gaussian with the given standard deviation.
    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(&mut self.rng)))
    }

    /// Uniform on the unit sphere (up to normalization), for power-iteration
    /// start vectors.
    pub fn unit_vector<T: Real>(&mut self, len: usize) -> ArrayD<T> {
        let dist = Uniform::new(-1.0, 1.0).expect("valid range");
        loop {
            let v: Vec<f64> = (0..len).map(|_| dist.sample(&mut self.rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                return ArrayD::from_shape_vec(
                    IxDyn(&[len]),
                    v.into_iter().map(|x| T::lit(x / norm)).collect(),
                )
                .expect("shape matches length");
            }
        }
    }

    /// Constant fill, kept here so every tensor creation goes through one
    /// place when building models.
    pub fn constant<T: Real>(&mut self, shape: &[usize], value: f64) -> ArrayD<T> {
        ArrayD::from_elem(IxDyn(shape), T::lit(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set(seed: u64) -> ParamSet<f64> {
        let mut init = Initializer::new(seed);
        let mut params = ParamSet::new();
        params
            .add("conv.weight", init.he_normal(&[4, 3, 3, 3], 27), true)
            .unwrap();
        params
            .add("conv.bias", init.constant(&[4], 0.0), true)
            .unwrap();
        params
            .add("bn.running_mean", init.constant(&[4], 0.0), false)
            .unwrap();
        params
    }

    #[test]
    fn same_seed_same_digest_different_seed_different_digest() {
        let a = sample_set(7);
        let b = sample_set(7);
        let c = sample_set(8);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn f32_and_f64_initialization_agree() {
        let mut init_a = Initializer::new(99);
        let mut init_b = Initializer::new(99);
        let w64: ArrayD<f64> = init_a.he_normal(&[8, 4], 4);
        let w32: ArrayD<f32> = init_b.he_normal(&[8, 4], 4);
        for (a, b) in w64.iter().zip(w32.iter()) {
            assert_eq!(*a as f32, *b, "f32 init must be the cast of the f64 draw");
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut params = ParamSet::<f64>::new();
        params.add("w", ArrayD::zeros(IxDyn(&[2])), true).unwrap();
        assert!(matches!(
            params.add("w", ArrayD::zeros(IxDyn(&[2])), true),
            Err(NnError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn trainable_count_excludes_state_tensors() {
        let params = sample_set(1);
        assert_eq!(params.num_trainable_scalars(), 4 * 3 * 3 * 3 + 4);
        assert_eq!(params.num_scalars(), 4 * 3 * 3 * 3 + 4 + 4);
    }

    #[test]
    fn assign_enforces_shape() {
        let mut params = sample_set(1);
        let id = params.id("conv.bias").unwrap();
        assert!(params.assign(id, ArrayD::zeros(IxDyn(&[5]))).is_err());
        assert!(params.assign(id, ArrayD::zeros(IxDyn(&[4]))).is_ok());
    }

    #[test]
    fn binding_routes_gradients_to_ids() {
        use crate::ops;
        let params = sample_set(3);
        let weight = params.id("conv.weight").unwrap();
        let tape = Tape::<f64>::new();
        let mut binding = Binding::new();
        let w = binding.bind(&tape, &params, weight);
        let loss = ops::mean_all(&tape, ops::square(&tape, w));
        let grads = tape.backward(loss);
        let routed = binding.gradients(&params, &grads);
        assert_eq!(routed.len(), 1);
        assert_eq!(routed[0].0, weight);
        assert_eq!(routed[0].1.shape(), params.get(weight).shape());
        // d(mean w^2)/dw = 2w/n: proportional to the weight itself.
        let n = params.get(weight).len() as f64;
        let expected = params.get(weight).mapv(|v| 2.0 * v / n);
        let diff = (&routed[0].1 - &expected)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
