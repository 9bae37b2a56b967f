//! Dataset ingestion, manifests, and training-sample synthesis.
//!
//! A dataset is a directory of scene subdirectories, each holding an HDR
//! frame sequence in lexicographic temporal order. [`ingest`] enumerates the
//! tree into a [`DatasetManifest`] — scene list, train/test split, exposure
//! schedule, noise parameters, and the radiance normalization scale computed
//! from the training split. [`build_samples`] then synthesizes the
//! alternating-exposure LDR pairs the pipeline trains and evaluates on.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array3, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FrameError, LdrFrame, LinearHdrFrame};
use crate::imgio::{read_hdr_frame, ImgIoError};
use crate::radiometry::{add_noise, simulate_ldr_indexed, NoiseSpec, RadiometryError};
use crate::scalar::Real;
use crate::seeding::derive_seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no scene subdirectories under {0:?}")]
    EmptyRoot(PathBuf),
    #[error("scene {id} has {frames} frame(s); sequences need at least 2")]
    SceneTooSmall { id: String, frames: usize },
    #[error("scene {id}: {file:?} is {found:?}, other frames are {expected:?}")]
    MixedResolutions {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
        file: PathBuf,
    },
    #[error("test_count {test_count} leaves no training scenes out of {scenes}")]
    TestCountTooLarge { test_count: usize, scenes: usize },
    #[error("training split is entirely black; cannot derive a radiance scale")]
    DegenerateScale,
    #[error("border crop of {border} px leaves nothing of a {h}x{w} raster")]
    BorderTooLarge { border: usize, h: usize, w: usize },
    #[error("patch size {size} must be at least 32 and fit the {h}x{w} frames")]
    BadPatchSize { size: usize, h: usize, w: usize },
    #[error("exposure schedule invalid: {0}")]
    BadSchedule(String),
    #[error("manifest schema version {found} is newer than supported version {supported}")]
    UnsupportedSchema { found: u32, supported: u32 },
    #[error("manifest {path:?} failed validation: {message}")]
    InvalidManifest { path: PathBuf, message: String },
    #[error("failed to parse manifest {path:?}: {message}")]
    ParseManifest { path: PathBuf, message: String },
    #[error(transparent)]
    Img(#[from] ImgIoError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One scene: an id (the subdirectory name) and its frame files in temporal
/// order, stored relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub frames: Vec<String>,
}

/// Exposure times cycled by frame index: frame `i` is captured at
/// `times[i % times.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSchedule {
    pub times: Vec<f64>,
}

impl Default for ExposureSchedule {
    fn default() -> Self {
        // Two alternating exposures three stops apart.
        Self { times: vec![1.0, 8.0] }
    }
}

impl ExposureSchedule {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.times.len() < 2 {
            return Err(DataError::BadSchedule(format!(
                "need at least 2 exposure times, got {}",
                self.times.len()
            )));
        }
        if self.times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(DataError::BadSchedule("times must be positive and finite".into()));
        }
        for i in 0..self.times.len() {
            let next = (i + 1) % self.times.len();
            if self.times[i] == self.times[next] {
                return Err(DataError::BadSchedule(format!(
                    "consecutive exposures {i} and {next} are both {}",
                    self.times[i]
                )));
            }
        }
        Ok(())
    }

    pub fn period(&self) -> usize {
        self.times.len()
    }

    pub fn index_for(&self, frame: usize) -> usize {
        frame % self.times.len()
    }

    pub fn time_for(&self, frame: usize) -> f64 {
        self.times[self.index_for(frame)]
    }
}

/// Serializable mirror of [`NoiseSpec`], kept scalar-type-free so manifests
/// do not depend on the working precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mean: f64,
    pub sigma_range: [f64; 2],
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mean: 0.0,
            sigma_range: [0.01, 0.05],
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn to_spec<T: Real>(&self) -> NoiseSpec<T> {
        NoiseSpec {
            mean: T::lit(self.mean),
            sigma_range: [T::lit(self.sigma_range[0]), T::lit(self.sigma_range[1])],
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub gamma: f64,
    /// Radiance normalization scale: a high percentile of the training
    /// split's pixel values.
    pub hdr_scale: f64,
    pub schedule: ExposureSchedule,
    pub noise: NoiseConfig,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: String| DataError::InvalidManifest {
            path: PathBuf::new(),
            message,
        };
        if self.schema_version > MANIFEST_SCHEMA_VERSION {
            return Err(DataError::UnsupportedSchema {
                found: self.schema_version,
                supported: MANIFEST_SCHEMA_VERSION,
            });
        }
        if !(self.hdr_scale > 0.0) {
            return Err(fail(format!("hdr_scale must be positive, got {}", self.hdr_scale)));
        }
        if !(self.gamma > 0.0) {
            return Err(fail(format!("gamma must be positive, got {}", self.gamma)));
        }
        self.schedule.validate()?;
        self.noise.to_spec::<f64>().validate()?;
        if self.scenes.is_empty() {
            return Err(fail("manifest lists no scenes".into()));
        }
        let mut ids = BTreeSet::new();
        for scene in &self.scenes {
            if scene.frames.len() < 2 {
                return Err(DataError::SceneTooSmall {
                    id: scene.id.clone(),
                    frames: scene.frames.len(),
                });
            }
            if !ids.insert(&scene.id) {
                return Err(fail(format!("duplicate scene id {}", scene.id)));
            }
        }
        Ok(())
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = toml::to_string_pretty(self).map_err(|e| DataError::ParseManifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let (manifest, warnings) = Self::load_with_warnings(path)?;
        for w in warnings {
            log::warn!("{}", w);
        }
        Ok(manifest)
    }

    /// Loads a manifest, returning warnings for unknown fields instead of
    /// failing on them, so files from newer minor revisions stay readable.
    pub fn load_with_warnings(path: &Path) -> Result<(Self, Vec<String>), DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |e: String| DataError::ParseManifest {
            path: path.to_path_buf(),
            message: e,
        };
        let table: toml::Table =
            toml::from_str(&text).map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let warnings = unknown_field_warnings(&table);
        let manifest: DatasetManifest = table
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        if manifest.schema_version > MANIFEST_SCHEMA_VERSION {
            return Err(DataError::UnsupportedSchema {
                found: manifest.schema_version,
                supported: MANIFEST_SCHEMA_VERSION,
            });
        }
        Ok((manifest, warnings))
    }
}

fn unknown_field_warnings(table: &toml::Table) -> Vec<String> {
    let known_top = ["schema_version", "gamma", "hdr_scale", "schedule", "noise", "scenes"];
    let known_schedule = ["times"];
    let known_noise = ["mean", "sigma_range", "seed"];
    let known_scene = ["id", "split", "frames"];
    let mut warnings = Vec::new();
    fn check(
        warnings: &mut Vec<String>,
        value: Option<&toml::Value>,
        known: &[&str],
        ctx: &str,
    ) {
        if let Some(toml::Value::Table(t)) = value {
            for key in t.keys() {
                if !known.contains(&key.as_str()) {
                    warnings.push(format!("ignoring unknown manifest field `{ctx}{key}`"));
                }
            }
        }
    }
    for key in table.keys() {
        if !known_top.contains(&key.as_str()) {
            warnings.push(format!("ignoring unknown manifest field `{key}`"));
        }
    }
    check(&mut warnings, table.get("schedule"), &known_schedule, "schedule.");
    check(&mut warnings, table.get("noise"), &known_noise, "noise.");
    if let Some(toml::Value::Array(scenes)) = table.get("scenes") {
        for scene in scenes {
            check(&mut warnings, Some(scene), &known_scene, "scenes.");
        }
    }
    warnings
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Scenes held out for testing; the lexicographically last ones.
    pub test_count: usize,
    /// Percentile (0, 100] of training-split pixel values used as the
    /// radiance normalization scale.
    pub percentile: f64,
    pub gamma: f64,
    pub schedule: ExposureSchedule,
    pub noise: NoiseConfig,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            test_count: 3,
            percentile: 99.9,
            gamma: crate::frame::DEFAULT_GAMMA,
            schedule: ExposureSchedule::default(),
            noise: NoiseConfig::default(),
        }
    }
}

/// Scans a dataset root and builds its manifest.
///
/// Scene subdirectories and frame files are ordered lexicographically; the
/// last `test_count` scenes form the test split. Running twice on the same
/// tree yields a byte-identical manifest.
pub fn ingest(root: &Path, opts: &IngestOptions) -> Result<DatasetManifest, DataError> {
    opts.schedule.validate()?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| DataError::Io { path: p, source }
    };
    let mut scene_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    scene_dirs.sort();
    if scene_dirs.is_empty() {
        return Err(DataError::EmptyRoot(root.to_path_buf()));
    }
    if opts.test_count >= scene_dirs.len() {
        return Err(DataError::TestCountTooLarge {
            test_count: opts.test_count,
            scenes: scene_dirs.len(),
        });
    }
    let train_cut = scene_dirs.len() - opts.test_count;

    let mut scenes = Vec::with_capacity(scene_dirs.len());
    let mut train_values: Vec<f64> = Vec::new();
    for (scene_pos, dir) in scene_dirs.iter().enumerate() {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("exr") | Some("hdr")
                )
            })
            .collect();
        files.sort();
        if files.len() < 2 {
            return Err(DataError::SceneTooSmall {
                id,
                frames: files.len(),
            });
        }
        let split = if scene_pos < train_cut { Split::Train } else { Split::Test };
        let mut dims: Option<(usize, usize)> = None;
        let mut rel_frames = Vec::with_capacity(files.len());
        for file in &files {
            let frame: LinearHdrFrame<f64> = read_hdr_frame(file)?;
            let found = (frame.height(), frame.width());
            match dims {
                None => dims = Some(found),
                Some(expected) if expected != found => {
                    return Err(DataError::MixedResolutions {
                        id,
                        expected,
                        found,
                        file: file.clone(),
                    });
                }
                Some(_) => {}
            }
            if split == Split::Train {
                collect_scale_values(frame.data(), &mut train_values);
            }
            let rel = file
                .strip_prefix(root)
                .unwrap_or(file)
                .to_string_lossy()
                .into_owned();
            rel_frames.push(rel);
        }
        scenes.push(SceneEntry {
            id,
            split,
            frames: rel_frames,
        });
    }

    let hdr_scale = percentile(&mut train_values, opts.percentile);
    if !(hdr_scale > 0.0) {
        return Err(DataError::DegenerateScale);
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        gamma: opts.gamma,
        hdr_scale,
        schedule: opts.schedule.clone(),
        noise: opts.noise.clone(),
        scenes,
    })
}

/// Frames beyond this pixel count contribute a deterministic stride sample
/// to the percentile pool instead of every value.
const SCALE_VALUES_PER_FRAME: usize = 8_000_000;

fn collect_scale_values<T: Real>(data: &Array3<T>, pool: &mut Vec<f64>) {
    let n = data.len();
    let stride = n.div_ceil(SCALE_VALUES_PER_FRAME).max(1);
    pool.extend(data.iter().step_by(stride).map(|v| v.as_f64()));
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// pool at or below it.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite radiance"));
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Square-crop specification for patch-based sample synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub patches_per_frame: usize,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 256,
            patches_per_frame: 4,
            seed: 0,
        }
    }
}

/// One training/evaluation unit: the reference frame `i` and its preceding
/// neighbor at the other exposure, plus ground truth for frame `i`.
///
/// Clean (pre-noise) LDRs ride along because denoiser training perturbs them
/// with fresh noise each iteration; the noisy pair is what the reconstruction
/// pipeline itself consumes.
#[derive(Debug, Clone)]
pub struct SequenceSample<T: Real> {
    pub scene_id: String,
    /// Index of the reference frame within its scene.
    pub frame_index: usize,
    pub reference_ldr: LdrFrame<T>,
    pub neighbor_ldr: LdrFrame<T>,
    pub reference_clean: LdrFrame<T>,
    pub neighbor_clean: LdrFrame<T>,
    pub gt_hdr: LinearHdrFrame<T>,
}

impl<T: Real> SequenceSample<T> {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: String| DataError::InvalidManifest {
            path: PathBuf::new(),
            message,
        };
        if self.reference_ldr.exposure_time() == self.neighbor_ldr.exposure_time() {
            return Err(fail("reference and neighbor share an exposure time".into()));
        }
        let dims = (self.reference_ldr.height(), self.reference_ldr.width());
        let all_match = [
            (self.neighbor_ldr.height(), self.neighbor_ldr.width()),
            (self.reference_clean.height(), self.reference_clean.width()),
            (self.neighbor_clean.height(), self.neighbor_clean.width()),
            (self.gt_hdr.height(), self.gt_hdr.width()),
        ]
        .iter()
        .all(|&d| d == dims);
        if !all_match {
            return Err(fail("sample rasters have mismatched spatial dims".into()));
        }
        Ok(())
    }
}

/// Removes `border` pixels from all four sides.
pub fn crop_border<T: Real>(data: &Array3<T>, border: usize) -> Result<Array3<T>, DataError> {
    let (h, w, _) = data.dim();
    if 2 * border >= h || 2 * border >= w {
        return Err(DataError::BorderTooLarge { border, h, w });
    }
    Ok(data
        .slice(s![border..h - border, border..w - border, ..])
        .to_owned())
}

/// Synthesizes samples for one split. Every consecutive frame pair `(i-1, i)`
/// of every scene yields one full-frame sample, or `patches_per_frame`
/// patch samples cropped at identical coordinates across all rasters.
/// Deterministic: noise streams derive from `(noise seed, scene, frame)` and
/// crops from `(patch seed, scene, frame)`.
pub fn build_samples<T: Real>(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    patch: Option<&PatchSpec>,
) -> Result<Vec<SequenceSample<T>>, DataError> {
    manifest.validate()?;
    let gamma = T::lit(manifest.gamma);
    let noise = manifest.noise.to_spec::<T>();
    let mut samples = Vec::new();
    for scene in manifest.scenes_in(split) {
        let mut previous: Option<(LinearHdrFrame<T>, LdrFrame<T>, LdrFrame<T>)> = None;
        for (i, rel) in scene.frames.iter().enumerate() {
            let hdr: LinearHdrFrame<T> = read_hdr_frame(&root.join(rel))?;
            let t = T::lit(manifest.schedule.time_for(i));
            let clean = simulate_ldr_indexed(&hdr, t, manifest.schedule.index_for(i), gamma)?;
            let frame_noise =
                noise.reseeded(derive_seed(noise.seed, "frame-noise", &scene.id, i as u64));
            let noisy = add_noise(&clean, &frame_noise)?;
            if let Some((_, prev_clean, prev_noisy)) = &previous {
                let sample = SequenceSample {
                    scene_id: scene.id.clone(),
                    frame_index: i,
                    reference_ldr: noisy.clone(),
                    neighbor_ldr: prev_noisy.clone(),
                    reference_clean: clean.clone(),
                    neighbor_clean: prev_clean.clone(),
                    gt_hdr: hdr.clone(),
                };
                sample.validate()?;
                match patch {
                    None => samples.push(sample),
                    Some(spec) => crop_patches(&sample, spec, &mut samples)?,
                }
            }
            previous = Some((hdr, clean, noisy));
        }
    }
    Ok(samples)
}

fn crop_patches<T: Real>(
    sample: &SequenceSample<T>,
    spec: &PatchSpec,
    out: &mut Vec<SequenceSample<T>>,
) -> Result<(), DataError> {
    let (h, w) = (sample.gt_hdr.height(), sample.gt_hdr.width());
    if spec.patch_size < 32 || spec.patch_size > h || spec.patch_size > w {
        return Err(DataError::BadPatchSize {
            size: spec.patch_size,
            h,
            w,
        });
    }
    let seed = derive_seed(spec.seed, "patch-crop", &sample.scene_id, sample.frame_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..spec.patches_per_frame {
        let y0 = rng.random_range(0..=h - spec.patch_size);
        let x0 = rng.random_range(0..=w - spec.patch_size);
        let crop3 = |data: &Array3<T>| {
            data.slice(s![y0..y0 + spec.patch_size, x0..x0 + spec.patch_size, ..])
                .to_owned()
        };
        let cropped = SequenceSample {
            scene_id: sample.scene_id.clone(),
            frame_index: sample.frame_index,
            reference_ldr: sample.reference_ldr.with_data(crop3(sample.reference_ldr.data()))?,
            neighbor_ldr: sample.neighbor_ldr.with_data(crop3(sample.neighbor_ldr.data()))?,
            reference_clean: sample
                .reference_clean
                .with_data(crop3(sample.reference_clean.data()))?,
            neighbor_clean: sample
                .neighbor_clean
                .with_data(crop3(sample.neighbor_clean.data()))?,
            gt_hdr: LinearHdrFrame::new(crop3(sample.gt_hdr.data()))?,
        };
        out.push(cropped);
    }
    Ok(())
}

/// One scene's full alternating-exposure sequence: the noisy LDR stream a
/// reconstruction consumes and the ground-truth HDR frames it is judged
/// against.
#[derive(Debug, Clone)]
pub struct SceneSequence<T: Real> {
    pub scene_id: String,
    pub ldr: Vec<LdrFrame<T>>,
    pub gt: Vec<LinearHdrFrame<T>>,
}

/// Synthesizes whole-scene LDR sequences for one split. Frame `i` of a scene
/// here is bit-identical to the same frame's appearance in
/// [`build_samples`]' output (same exposure schedule, same derived noise
/// stream), so evaluation inputs match training inputs exactly.
pub fn build_sequences<T: Real>(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<SceneSequence<T>>, DataError> {
    manifest.validate()?;
    let gamma = T::lit(manifest.gamma);
    let noise = manifest.noise.to_spec::<T>();
    let mut sequences = Vec::new();
    for scene in manifest.scenes_in(split) {
        let mut ldr = Vec::with_capacity(scene.frames.len());
        let mut gt = Vec::with_capacity(scene.frames.len());
        for (i, rel) in scene.frames.iter().enumerate() {
            let hdr: LinearHdrFrame<T> = read_hdr_frame(&root.join(rel))?;
            let t = T::lit(manifest.schedule.time_for(i));
            let clean = simulate_ldr_indexed(&hdr, t, manifest.schedule.index_for(i), gamma)?;
            let frame_noise =
                noise.reseeded(derive_seed(noise.seed, "frame-noise", &scene.id, i as u64));
            ldr.push(add_noise(&clean, &frame_noise)?);
            gt.push(hdr);
        }
        sequences.push(SceneSequence {
            scene_id: scene.id.clone(),
            ldr,
            gt,
        });
    }
    Ok(sequences)
}

/// Clean synthetic LDRs of one exposure role across a split — the corpus a
/// per-exposure denoiser trains on (fresh noise is added per iteration).
pub fn build_denoiser_frames<T: Real>(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    exposure_index: usize,
) -> Result<Vec<LdrFrame<T>>, DataError> {
    manifest.validate()?;
    let gamma = T::lit(manifest.gamma);
    let mut frames = Vec::new();
    for scene in manifest.scenes_in(split) {
        for (i, rel) in scene.frames.iter().enumerate() {
            if manifest.schedule.index_for(i) != exposure_index {
                continue;
            }
            let hdr: LinearHdrFrame<T> = read_hdr_frame(&root.join(rel))?;
            let t = T::lit(manifest.schedule.time_for(i));
            frames.push(simulate_ldr_indexed(&hdr, t, exposure_index, gamma)?);
        }
    }
    Ok(frames)
}
