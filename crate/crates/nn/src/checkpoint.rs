//! Versioned binary checkpoints.
//!
//! A checkpoint is one file: the magic bytes `HVCK`, a little-endian `u32`
//! format version, a little-endian `u64` header length, a JSON header, and a
//! raw data section storing every tensor as native-width little-endian
//! scalars in logical (row-major) order. The header names the checkpoint
//! kind (which model or trainer wrote it), the scalar dtype, the full run
//! configuration, bookkeeping metadata (step, seed, stage, config hash) and
//! a descriptor table with byte offsets into the data section.
//!
//! Model parameters and optimizer moments travel in the same tensor table;
//! optimizer tensors are distinguished by their `adam.` name prefix and are
//! never matched against model parameters. Loading is strict: wrong magic,
//! version, dtype, kind, tensor count or byte ranges all fail loudly rather
//! than producing a silently different model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hdrvid_core::Real;

use crate::error::NnError;
use crate::params::ParamSet;

/// First four bytes of every checkpoint file.
pub const MAGIC: [u8; 4] = *b"HVCK";

/// Current format version; bumped on any layout change.
pub const VERSION: u32 = 1;

/// Name prefix separating optimizer moments from model parameters.
const OPTIMIZER_PREFIX: &str = "adam.";

/// Schema tag embedded in the JSON header as a second line of defense
/// against feeding some other tool's `HVCK`-coincident file to the loader.
const SCHEMA: &str = "hdrvid-checkpoint";

/// Bookkeeping that must survive a save/load cycle for training to resume
/// on the exact trajectory it left: optimizer step count, the seed the run
/// was started with, the schedule stage, and a hash of the effective
/// configuration so a resume under silently different settings is caught.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub step: u64,
    pub seed: u64,
    pub stage: String,
    pub config_hash: String,
    /// Free-form annotations (loss at save time, wall-clock, ...). Ordered
    /// so that serialization is deterministic.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Byte offset into the data section.
    offset: u64,
    /// Element count; redundant with `shape` and cross-checked on load.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    kind: String,
    dtype: String,
    config: serde_json::Value,
    metadata: CheckpointMetadata,
    tensors: Vec<TensorEntry>,
}

/// Writes a checkpoint. `kind` tags what produced it (for example
/// `"denoiser-low"` or `"gan-trainer"`); loaders assert it before touching
/// tensors. `tensors` is borrowed `(name, value, trainable)` triples, so a
/// caller can chain model parameters straight out of a [`ParamSet`] with
/// optimizer state from [`crate::adam::Adam::export_state`]:
///
/// ```
/// # use hdrvid_nn::checkpoint::{save_checkpoint, CheckpointMetadata};
/// # use hdrvid_nn::params::ParamSet;
/// # use ndarray::ArrayD;
/// # let dir = tempfile::tempdir().unwrap();
/// # let path = dir.path().join("model.hvck");
/// # let mut params = ParamSet::<f32>::new();
/// # params.add("w", ArrayD::zeros(ndarray::IxDyn(&[2, 2])), true).unwrap();
/// # let optimizer_tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
/// save_checkpoint(
///     &path,
///     "demo",
///     &serde_json::json!({}),
///     &CheckpointMetadata::default(),
///     params
///         .iter()
///         .map(|(_, name, value, trainable)| (name, value, trainable))
///         .chain(optimizer_tensors.iter().map(|(n, v)| (n.as_str(), v, false))),
/// )
/// .unwrap();
/// ```
pub fn save_checkpoint<'a, T, C, I>(
    path: &Path,
    kind: &str,
    config: &C,
    metadata: &CheckpointMetadata,
    tensors: I,
) -> Result<(), NnError>
where
    T: Real,
    C: Serialize + ?Sized,
    I: IntoIterator<Item = (&'a str, &'a ArrayD<T>, bool)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    let width = scalar_width(T::DTYPE);

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for &(name, value, trainable) in &tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            trainable,
            offset,
            len: value.len() as u64,
        });
        offset += (value.len() * width) as u64;
    }

    let header = Header {
        schema: SCHEMA.to_string(),
        kind: kind.to_string(),
        dtype: T::DTYPE.to_string(),
        config: serde_json::to_value(config)?,
        metadata: metadata.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut bytes =
        Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, value, _) in tensors {
        // `iter` walks logical order regardless of the array's memory
        // layout, so views and transposes serialize identically to their
        // owned counterparts.
        match T::DTYPE {
            "f32" => {
                for v in value.iter() {
                    bytes.extend_from_slice(
                        &(v.as_f64() as f32).to_le_bytes(),
                    );
                }
            }
            _ => {
                for v in value.iter() {
                    bytes.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
    }

    fs::write(path, bytes)?;
    Ok(())
}

/// A parsed checkpoint: header fields plus every tensor decoded into the
/// requested scalar type. Loading refuses files whose stored dtype differs
/// from `T`, so decoding is always lossless.
#[derive(Debug)]
pub struct LoadedCheckpoint<T: Real> {
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: CheckpointMetadata,
    /// `(name, value, trainable)` in file order; optimizer tensors keep
    /// their `adam.` prefix.
    pub tensors: Vec<(String, ArrayD<T>, bool)>,
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
) -> Result<LoadedCheckpoint<T>, NnError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| {
            NnError::CorruptCheckpoint("header length overflows".into())
        })?)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            NnError::CorruptCheckpoint(
                "header extends past end of file".into(),
            )
        })?;

    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    if header.schema != SCHEMA {
        return Err(NnError::CorruptCheckpoint(format!(
            "unknown schema `{}`",
            header.schema
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(NnError::DtypeMismatch {
            stored: header.dtype,
            requested: T::DTYPE.to_string(),
        });
    }

    let data = &bytes[data_start..];
    let width = scalar_width(T::DTYPE);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.len != numel as u64 {
            return Err(NnError::CorruptCheckpoint(format!(
                "tensor `{}` stores {} elements but its shape {:?} needs {}",
                entry.name, entry.len, entry.shape, numel
            )));
        }
        let start = usize::try_from(entry.offset).ok();
        let span = start
            .and_then(|s| s.checked_add(numel * width))
            .filter(|&end| end <= data.len());
        let (start, end) = match (start, span) {
            (Some(s), Some(e)) => (s, e),
            _ => {
                return Err(NnError::CorruptCheckpoint(format!(
                    "tensor `{}` data lies outside the file",
                    entry.name
                )))
            }
        };
        let scalars: Vec<T> = data[start..end]
            .chunks_exact(width)
            .map(|chunk| match T::DTYPE {
                "f32" => T::lit(f64::from(f32::from_le_bytes(
                    chunk.try_into().unwrap(),
                ))),
                _ => T::lit(f64::from_le_bytes(chunk.try_into().unwrap())),
            })
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), scalars)
            .map_err(|e| {
                NnError::CorruptCheckpoint(format!(
                    "tensor `{}`: {e}",
                    entry.name
                ))
            })?;
        tensors.push((entry.name.clone(), value, entry.trainable));
    }

    Ok(LoadedCheckpoint {
        kind: header.kind,
        config: header.config,
        metadata: header.metadata,
        tensors,
    })
}

impl<T: Real> LoadedCheckpoint<T> {
    /// Asserts the checkpoint was written by the expected producer.
    pub fn expect_kind(&self, expected: &str) -> Result<(), NnError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(NnError::CheckpointKind {
                expected: expected.to_string(),
                got: self.kind.clone(),
            })
        }
    }

    /// Deserializes the stored configuration into a concrete type.
    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C, NnError> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Copies the stored model parameters (everything without the `adam.`
    /// prefix) into `params`, matching by name. The parameter count must
    /// equal the model's registration count exactly — a checkpoint from a
    /// differently configured model is rejected rather than partially
    /// applied — and shape and trainability must agree per tensor.
    pub fn restore_params(
        &self,
        params: &mut ParamSet<T>,
    ) -> Result<(), NnError> {
        let model: Vec<_> = self
            .tensors
            .iter()
            .filter(|(name, _, _)| !name.starts_with(OPTIMIZER_PREFIX))
            .collect();
        let expected = params.iter().count();
        if model.len() != expected {
            return Err(NnError::CheckpointTensorCount {
                expected,
                got: model.len(),
            });
        }
        for (name, value, trainable) in model {
            let id = params.id(name)?;
            if params.trainable(id) != *trainable {
                return Err(NnError::CorruptCheckpoint(format!(
                    "tensor `{name}` trainability disagrees with the model"
                )));
            }
            params.assign(id, value.clone())?;
        }
        Ok(())
    }

    /// The `adam.`-prefixed tensors, prefix intact, in the form
    /// [`crate::adam::Adam::restore_state`] consumes.
    pub fn optimizer_tensors(&self) -> Vec<(String, ArrayD<T>)> {
        self.tensors
            .iter()
            .filter(|(name, _, _)| name.starts_with(OPTIMIZER_PREFIX))
            .map(|(name, value, _)| (name.clone(), value.clone()))
            .collect()
    }
}

fn scalar_width(dtype: &str) -> usize {
    match dtype {
        "f32" => 4,
        "f64" => 8,
        other => unreachable!("unsupported checkpoint dtype `{other}`"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::{Adam, AdamConfig};
    use ndarray::Array;

    fn sample_params<T: Real>() -> ParamSet<T> {
        let mut params = ParamSet::new();
        params
            .add(
                "layer.weight",
                Array::linspace(T::lit(-1.5), T::lit(2.5), 24)
                    .into_shape_with_order(IxDyn(&[2, 3, 4]))
                    .unwrap(),
                true,
            )
            .unwrap();
        params
            .add(
                "layer.bias",
                ArrayD::from_elem(IxDyn(&[3]), T::lit(0.125)),
                true,
            )
            .unwrap();
        params
            .add(
                "layer.u",
                ArrayD::from_elem(IxDyn(&[2]), T::lit(0.7071)),
                false,
            )
            .unwrap();
        params
    }

    fn metadata() -> CheckpointMetadata {
        CheckpointMetadata {
            step: 41,
            seed: 7,
            stage: "stage2".into(),
            config_hash: "deadbeef".into(),
            extra: BTreeMap::from([("note".to_string(), "t".to_string())]),
        }
    }

    fn save_params<T: Real>(
        path: &Path,
        kind: &str,
        params: &ParamSet<T>,
    ) {
        save_checkpoint(
            path,
            kind,
            &serde_json::json!({"base_channels": 16}),
            &metadata(),
            params.iter().map(|(_, n, v, t)| (n, v, t)),
        )
        .unwrap();
    }

    fn round_trip_is_bit_exact<T: Real>() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hvck");
        let params = sample_params::<T>();
        save_params(&path, "generator", &params);

        let loaded = load_checkpoint::<T>(&path).unwrap();
        assert_eq!(loaded.kind, "generator");
        assert_eq!(loaded.metadata, metadata());
        assert_eq!(
            loaded.config,
            serde_json::json!({"base_channels": 16})
        );

        // Zero the target first so the restore has to do real work.
        let mut restored = sample_params::<T>();
        let ids: Vec<_> = restored.iter().map(|(id, _, _, _)| id).collect();
        for id in ids {
            let zeros = ArrayD::zeros(restored.get(id).raw_dim());
            restored.assign(id, zeros).unwrap();
        }
        assert_ne!(restored.digest(), params.digest());
        loaded.restore_params(&mut restored).unwrap();
        assert_eq!(restored.digest(), params.digest());
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_widths() {
        round_trip_is_bit_exact::<f32>();
        round_trip_is_bit_exact::<f64>();
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hvck");
        let params = sample_params::<f64>();
        save_params(&path, "generator", &params);
        let good = fs::read(&path).unwrap();

        // Not our magic.
        fs::write(&path, b"PNG\r\n").unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(NnError::BadMagic)
        ));

        // Future version.
        let mut bumped = good.clone();
        bumped[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path, &bumped).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(NnError::UnsupportedVersion(9))
        ));

        // Header length claims more bytes than the file holds.
        let mut overlong = good.clone();
        overlong[8..16]
            .copy_from_slice(&(good.len() as u64 * 2).to_le_bytes());
        fs::write(&path, &overlong).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(NnError::CorruptCheckpoint(_))
        ));

        // Data section truncated mid-tensor.
        fs::write(&path, &good[..good.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(NnError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn rejects_dtype_and_kind_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hvck");
        save_params(&path, "discriminator", &sample_params::<f32>());

        match load_checkpoint::<f64>(&path) {
            Err(NnError::DtypeMismatch { stored, requested }) => {
                assert_eq!(stored, "f32");
                assert_eq!(requested, "f64");
            }
            other => panic!("expected dtype mismatch, got {other:?}"),
        }

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        loaded.expect_kind("discriminator").unwrap();
        match loaded.expect_kind("generator") {
            Err(NnError::CheckpointKind { expected, got }) => {
                assert_eq!(expected, "generator");
                assert_eq!(got, "discriminator");
            }
            other => panic!("expected kind mismatch, got {other:?}"),
        }
    }

    #[test]
    fn restore_rejects_wrong_tensor_count_and_trainability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hvck");
        save_params(&path, "generator", &sample_params::<f64>());
        let loaded = load_checkpoint::<f64>(&path).unwrap();

        let mut too_small = ParamSet::<f64>::new();
        too_small
            .add("layer.weight", ArrayD::zeros(IxDyn(&[2, 3, 4])), true)
            .unwrap();
        match loaded.restore_params(&mut too_small) {
            Err(NnError::CheckpointTensorCount { expected, got }) => {
                assert_eq!(expected, 1);
                assert_eq!(got, 3);
            }
            other => panic!("expected tensor count mismatch, got {other:?}"),
        }

        let mut flipped = ParamSet::<f64>::new();
        flipped
            .add("layer.weight", ArrayD::zeros(IxDyn(&[2, 3, 4])), true)
            .unwrap();
        flipped
            .add("layer.bias", ArrayD::zeros(IxDyn(&[3])), true)
            .unwrap();
        flipped
            .add("layer.u", ArrayD::zeros(IxDyn(&[2])), true)
            .unwrap();
        assert!(matches!(
            loaded.restore_params(&mut flipped),
            Err(NnError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn optimizer_state_round_trip_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trainer.hvck");

        // Drive a few Adam steps on a quadratic so the moments are nonzero.
        let grads_at = |params: &ParamSet<f64>| {
            params
                .iter()
                .filter(|(_, _, _, trainable)| *trainable)
                .map(|(id, _, value, _)| (id, value * 2.0))
                .collect::<Vec<_>>()
        };
        let mut params = sample_params::<f64>();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            let grads = grads_at(&params);
            adam.step(&mut params, &grads);
        }

        let optimizer = adam.export_state(&params);
        let meta = CheckpointMetadata {
            step: adam.step_count(),
            ..metadata()
        };
        save_checkpoint(
            &path,
            "gan-trainer",
            &serde_json::json!({"lr": 1e-4}),
            &meta,
            params
                .iter()
                .map(|(_, n, v, t)| (n, v, t))
                .chain(optimizer.iter().map(|(n, v)| (n.as_str(), v, false))),
        )
        .unwrap();

        // Continue the original run as reference.
        let mut reference_params = params;
        let mut reference_adam = adam;
        for _ in 0..3 {
            let grads = grads_at(&reference_params);
            reference_adam.step(&mut reference_params, &grads);
        }

        // Resume from file and take the same three steps.
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        loaded.expect_kind("gan-trainer").unwrap();
        let mut resumed_params = sample_params::<f64>();
        loaded.restore_params(&mut resumed_params).unwrap();
        let mut resumed_adam = Adam::new(AdamConfig::default());
        resumed_adam
            .restore_state(
                &resumed_params,
                loaded.metadata.step,
                &loaded.optimizer_tensors(),
            )
            .unwrap();
        for _ in 0..3 {
            let grads = grads_at(&resumed_params);
            resumed_adam.step(&mut resumed_params, &grads);
        }

        assert_eq!(resumed_adam.step_count(), reference_adam.step_count());
        assert_eq!(resumed_params.digest(), reference_params.digest());
    }
}
