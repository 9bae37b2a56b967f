//! Run configuration: one TOML file covering every training stage.
//!
//! Every field has a default, so a config file only states deviations. The
//! canonical JSON serialization of the whole struct is hashed (SHA-256) into
//! a `config_hash` that travels in checkpoints and reports; two runs are
//! comparable exactly when their hashes match. CLI flags override file
//! values — the merged result is what gets hashed.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hdrvid_core::dataio::PatchSpec;
use hdrvid_nn::losses::LossWeights;
use hdrvid_nn::models::{DenoiserConfig, DiscriminatorConfig, GeneratorConfig};

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Root seed; every random decision derives from it.
    pub seed: u64,
    pub denoiser: DenoiserTrainConfig,
    pub gan: GanTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            denoiser: DenoiserTrainConfig::default(),
            gan: GanTrainConfig::default(),
        }
    }
}

/// Pixel-space objective for denoiser training. The formal definition is
/// mean absolute error; the squared form is kept as a switch because the
/// training protocol is also described with it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserObjective {
    #[default]
    L1,
    L2,
}

impl fmt::Display for DenoiserObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiserObjective::L1 => "l1",
            DenoiserObjective::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch: usize,
    pub learning_rate: f64,
    pub objective: DenoiserObjective,
    pub model: DenoiserConfig,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 4,
            learning_rate: 1e-4,
            objective: DenoiserObjective::default(),
            model: DenoiserConfig::default(),
        }
    }
}

/// Which feature space the content/style terms compare in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Fixed random convolution stack; no pretrained assets required.
    #[default]
    RandomConv,
    /// Raw pixels as the single feature layer.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    /// Reconstruction-objective stage.
    pub stage1_epochs: usize,
    pub stage1_batch: usize,
    /// Fine-tuning stage under the temporally regularized total objective.
    pub stage2_epochs: usize,
    pub stage2_batch: usize,
    pub learning_rate: f64,
    /// Adaptive-moment coefficients.
    pub beta1: f64,
    pub beta2: f64,
    /// Feed the merge network denoised frames (the full pipeline) or the
    /// raw noisy frames (the ablation arm).
    pub with_denoiser: bool,
    pub feature_space: FeatureSpace,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Optional pair-level patch cropping; `None` trains on full frames.
    pub patch: Option<PatchSpec>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 70,
            stage1_batch: 20,
            stage2_epochs: 15,
            stage2_batch: 35,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            with_denoiser: true,
            feature_space: FeatureSpace::default(),
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            patch: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::MissingArtifact {
            what: "config file",
            path: path.to_path_buf(),
        }.combine_io(e))?;
        let config: Self = toml::from_str(&text).map_err(|e| PipelineError::ParseConfig {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| PipelineError::Config(format!("config not serializable: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.denoiser;
        let g = &self.gan;
        for (name, batch) in [
            ("denoiser.batch", d.batch),
            ("gan.stage1_batch", g.stage1_batch),
            ("gan.stage2_batch", g.stage2_batch),
        ] {
            if batch == 0 {
                return Err(PipelineError::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, lr) in [
            ("denoiser.learning_rate", d.learning_rate),
            ("gan.learning_rate", g.learning_rate),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(PipelineError::Config(format!(
                    "{name} must be positive and finite, got {lr}"
                )));
            }
        }
        for (name, beta) in [("gan.beta1", g.beta1), ("gan.beta2", g.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(PipelineError::Config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        d.model.validate()?;
        g.generator.validate()?;
        g.discriminator.validate()?;
        g.weights.validate()?;
        if let Some(patch) = &g.patch {
            let multiple = g.generator.spatial_multiple();
            if patch.patch_size < 32 || patch.patch_size % multiple != 0 {
                return Err(PipelineError::Config(format!(
                    "gan.patch.patch_size must be at least 32 (the discriminator \
                     floor) and a multiple of {multiple}, got {}",
                    patch.patch_size
                )));
            }
            if patch.patches_per_frame == 0 {
                return Err(PipelineError::Config(
                    "gan.patch.patches_per_frame must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form. Field order is fixed by the
    /// struct definition, so equal configs hash equal across processes.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl PipelineError {
    /// Keeps "file not found" actionable while other I/O failures surface
    /// as plain I/O errors.
    fn combine_io(self, e: std::io::Error) -> PipelineError {
        if e.kind() == std::io::ErrorKind::NotFound {
            self
        } else {
            PipelineError::Io(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_staged_protocol() {
        let config = TrainConfig::default();
        assert_eq!(config.denoiser.epochs, 100);
        assert_eq!(config.gan.stage1_epochs, 70);
        assert_eq!(config.gan.stage1_batch, 20);
        assert_eq!(config.gan.stage2_epochs, 15);
        assert_eq!(config.gan.stage2_batch, 35);
        assert_eq!(config.gan.learning_rate, 1e-4);
        assert_eq!((config.gan.beta1, config.gan.beta2), (0.9, 0.999));
        assert!(config.gan.with_denoiser);
        config.validate().unwrap();
    }

    #[test]
    fn partial_toml_overrides_only_named_fields() {
        let text = r#"
            seed = 9

            [gan]
            stage1_epochs = 2
            stage1_batch = 4

            [gan.generator]
            base_channels = 16
            n_resblocks = 2

            [gan.weights]
            lambda_style = 500.0
        "#;
        let config: TrainConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.gan.stage1_epochs, 2);
        assert_eq!(config.gan.stage2_epochs, 15, "untouched field keeps default");
        assert_eq!(config.gan.generator.base_channels, 16);
        assert_eq!(config.gan.generator.input_channels, 12);
        assert_eq!(config.gan.weights.lambda_style, 500.0);
        assert_eq!(config.gan.weights.lambda_adv, 5.0);
        assert_eq!(config.denoiser.epochs, 100);
    }

    #[test]
    fn unknown_top_level_field_is_a_parse_error() {
        let err = toml::from_str::<TrainConfig>("sede = 9").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn hash_changes_with_any_field_and_only_with_fields() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.gan.with_denoiser = false;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        let mut config = TrainConfig::default();
        config.seed = 1234;
        config.gan.patch = Some(PatchSpec {
            patch_size: 64,
            patches_per_frame: 2,
            seed: 5,
        });
        config.save(&path).unwrap();
        let loaded = TrainConfig::load(&path).unwrap();
        assert_eq!(loaded, config);
        assert_eq!(loaded.config_hash(), config.config_hash());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut config = TrainConfig::default();
        config.gan.stage1_batch = 0;
        assert!(matches!(config.validate(), Err(PipelineError::Config(_))));

        let mut config = TrainConfig::default();
        config.denoiser.learning_rate = 0.0;
        assert!(matches!(config.validate(), Err(PipelineError::Config(_))));

        let mut config = TrainConfig::default();
        config.gan.patch = Some(PatchSpec {
            patch_size: 30,
            patches_per_frame: 1,
            seed: 0,
        });
        assert!(matches!(config.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn missing_file_is_actionable() {
        let err = TrainConfig::load(Path::new("/nonexistent/train.toml")).unwrap_err();
        assert!(matches!(err, PipelineError::MissingArtifact { .. }));
    }
}
