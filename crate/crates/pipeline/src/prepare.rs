//! Sample preprocessing for the merge trainer.
//!
//! The adversarial stage consumes *temporal pairs*: two consecutive
//! reconstructions of the same scene, judged jointly by the discriminator
//! and tied together by the temporal penalty. This module turns the flat
//! sample stream into such pairs and runs everything that happens outside
//! the differentiable graph — denoising, flow alignment, input assembly and
//! target tonemapping. All of it is deterministic given frozen denoisers and
//! a fixed flow backend, so pairs are prepared once and reused every epoch.

use std::collections::HashMap;

use ndarray::{s, Array3, ArrayD, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use hdrvid_core::dataio::{PatchSpec, SequenceSample};
use hdrvid_core::flow::{align_neighbor_with_flow, estimate_flow, exposure_normalize, FlowBackend};
use hdrvid_core::frame::LdrFrame;
use hdrvid_core::radiometry::{normalize_radiance, tonemap};
use hdrvid_core::seeding::derive_seed;
use hdrvid_core::Real;
use hdrvid_nn::models::{DenoiserModel, ExposureRole, GeneratorModel};

use crate::error::PipelineError;

/// One training unit: everything the merge networks need for a consecutive
/// frame pair `(i-1, i)`, preassembled as batch-of-one tensors.
#[derive(Debug, Clone)]
pub struct PreparedPair<T: Real> {
    pub scene_id: String,
    /// Reference frame index of the current (later) half.
    pub frame_index: usize,
    /// `[1, 12, h, w]` merge input for frame `i`.
    pub cur_input: ArrayD<T>,
    /// `[1, 12, h, w]` merge input for frame `i-1`.
    pub prev_input: ArrayD<T>,
    /// `[1, 3, h, w]` tonemapped ground truth for frame `i`.
    pub cur_target: ArrayD<T>,
    /// `[1, 3, h, w]` tonemapped ground truth for frame `i-1`.
    pub prev_target: ArrayD<T>,
    /// `[1, h, w, 2]` sampling offsets: warping the previous reconstruction
    /// by this flow approximates the current one. Held constant in training.
    pub flow: ArrayD<T>,
}

impl<T: Real> PreparedPair<T> {
    pub fn height(&self) -> usize {
        self.cur_input.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.cur_input.shape()[3]
    }
}

/// A stacked mini-batch of [`PreparedPair`]s sharing spatial dims.
#[derive(Debug, Clone)]
pub struct PairBatch<T: Real> {
    pub cur_inputs: ArrayD<T>,
    pub prev_inputs: ArrayD<T>,
    pub cur_targets: ArrayD<T>,
    pub prev_targets: ArrayD<T>,
    pub flow: ArrayD<T>,
}

impl<T: Real> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.cur_inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks pairs along the batch axis. All pairs must share spatial dims;
/// the trainer groups by size before calling.
pub fn stack_pairs<T: Real>(pairs: &[&PreparedPair<T>]) -> PairBatch<T> {
    assert!(!pairs.is_empty(), "empty batch");
    let stack = |field: &dyn Fn(&PreparedPair<T>) -> &ArrayD<T>| {
        let views: Vec<_> = pairs.iter().map(|p| field(p).view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("batch dims agree")
    };
    PairBatch {
        cur_inputs: stack(&|p| &p.cur_input),
        prev_inputs: stack(&|p| &p.prev_input),
        cur_targets: stack(&|p| &p.cur_target),
        prev_targets: stack(&|p| &p.prev_target),
        flow: stack(&|p| &p.flow),
    }
}

/// HWC raster to a batch-of-one NCHW tensor.
fn nchw<T: Real>(frame: &Array3<T>) -> ArrayD<T> {
    let transposed = frame.view().permuted_axes([2, 0, 1]).to_owned();
    transposed.insert_axis(Axis(0)).into_dyn()
}

/// The fixed front half of the pipeline: denoisers (when enabled), flow
/// backend, and the radiometric constants that map ground truth into the
/// generator's output domain.
pub struct MergePreprocessor<'a, T: Real> {
    /// `(low, high)` by exposure role; `None` feeds raw noisy frames.
    pub denoisers: Option<(&'a DenoiserModel<T>, &'a DenoiserModel<T>)>,
    pub flow_backend: &'a dyn FlowBackend<T>,
    /// Supplies the merge-input channel layout.
    pub generator: &'a GeneratorModel<T>,
    /// Radiance normalization scale from the manifest.
    pub hdr_scale: f64,
    /// Tonemapping strength for targets.
    pub mu: f64,
}

impl<T: Real> MergePreprocessor<'_, T> {
    /// Runs a frame through its exposure-matched denoiser, or passes it
    /// through untouched in the ablation arm.
    pub fn denoise(&self, frame: &LdrFrame<T>) -> Result<LdrFrame<T>, PipelineError> {
        match self.denoisers {
            None => Ok(frame.clone()),
            Some((low, high)) => {
                let model = match ExposureRole::from_exposure_index(frame.exposure_index()) {
                    ExposureRole::Low => low,
                    ExposureRole::High => high,
                };
                Ok(model.denoise(frame)?)
            }
        }
    }

    /// Denoise + align + assemble one frame's merge input.
    pub fn merge_input(
        &self,
        reference: &LdrFrame<T>,
        neighbor: &LdrFrame<T>,
    ) -> Result<ArrayD<T>, PipelineError> {
        let reference = self.denoise(reference)?;
        let neighbor = self.denoise(neighbor)?;
        let (aligned, _) = align_neighbor_with_flow(self.flow_backend, &reference, &neighbor)?;
        Ok(self.generator.merge_input(&reference, &aligned)?)
    }

    /// Ground truth mapped into the generator's output domain.
    fn target(&self, sample: &SequenceSample<T>) -> Result<ArrayD<T>, PipelineError> {
        let normalized = normalize_radiance(&sample.gt_hdr, T::lit(self.hdr_scale))?;
        let tonemapped = tonemap(&normalized, T::lit(self.mu))?;
        Ok(nchw(tonemapped.data()))
    }

    /// Pairs each sample with its scene predecessor and preprocesses both
    /// halves. Samples without a predecessor in the stream (the first pair
    /// of every scene) are dropped — a temporal pair needs two consecutive
    /// reconstructions. With `patch` set, every pair yields
    /// `patches_per_frame` crops taken at identical coordinates across all
    /// rasters.
    pub fn prepare_pairs(
        &self,
        samples: &[SequenceSample<T>],
        patch: Option<&PatchSpec>,
    ) -> Result<Vec<PreparedPair<T>>, PipelineError> {
        let by_key: HashMap<(&str, usize), &SequenceSample<T>> = samples
            .iter()
            .map(|sample| ((sample.scene_id.as_str(), sample.frame_index), sample))
            .collect();

        // Denoised frames, keyed by (scene, frame). A frame appears in up to
        // three pairs; denoise it once.
        let mut denoised: HashMap<(String, usize), LdrFrame<T>> = HashMap::new();
        let mut denoise_cached =
            |this: &Self, scene: &str, index: usize, frame: &LdrFrame<T>| -> Result<LdrFrame<T>, PipelineError> {
                if let Some(hit) = denoised.get(&(scene.to_string(), index)) {
                    return Ok(hit.clone());
                }
                let clean = this.denoise(frame)?;
                denoised.insert((scene.to_string(), index), clean.clone());
                Ok(clean)
            };

        let mut pairs = Vec::new();
        for cur in samples {
            let Some(prev) = by_key.get(&(cur.scene_id.as_str(), cur.frame_index.wrapping_sub(1)))
            else {
                continue;
            };
            let scene = cur.scene_id.as_str();

            let cur_ref = denoise_cached(self, scene, cur.frame_index, &cur.reference_ldr)?;
            let cur_nbr = denoise_cached(self, scene, cur.frame_index - 1, &cur.neighbor_ldr)?;
            let prev_ref = denoise_cached(self, scene, prev.frame_index, &prev.reference_ldr)?;
            let prev_nbr =
                denoise_cached(self, scene, prev.frame_index.wrapping_sub(1), &prev.neighbor_ldr)?;

            let (cur_aligned, _) =
                align_neighbor_with_flow(self.flow_backend, &cur_ref, &cur_nbr)?;
            let (prev_aligned, _) =
                align_neighbor_with_flow(self.flow_backend, &prev_ref, &prev_nbr)?;

            // Temporal flow between the two reference frames (alternating
            // exposures, so normalize first).
            let (cur_norm, prev_norm) = exposure_normalize(&cur_ref, &prev_ref)?;
            let flow = estimate_flow(self.flow_backend, &cur_norm, &prev_norm)?;

            let pair = PreparedPair {
                scene_id: cur.scene_id.clone(),
                frame_index: cur.frame_index,
                cur_input: self.generator.merge_input(&cur_ref, &cur_aligned)?,
                prev_input: self.generator.merge_input(&prev_ref, &prev_aligned)?,
                cur_target: self.target(cur)?,
                prev_target: self.target(prev)?,
                flow: nchw_flow(flow.data()),
            };
            match patch {
                None => pairs.push(pair),
                Some(spec) => crop_pair_patches(&pair, spec, &mut pairs)?,
            }
        }
        Ok(pairs)
    }
}

/// HWC2 flow raster to `[1, H, W, 2]`.
fn nchw_flow<T: Real>(flow: &Array3<T>) -> ArrayD<T> {
    flow.clone().insert_axis(Axis(0)).into_dyn()
}

fn crop_pair_patches<T: Real>(
    pair: &PreparedPair<T>,
    spec: &PatchSpec,
    out: &mut Vec<PreparedPair<T>>,
) -> Result<(), PipelineError> {
    let (h, w) = (pair.height(), pair.width());
    if spec.patch_size > h || spec.patch_size > w {
        return Err(PipelineError::Config(format!(
            "patch size {} exceeds the {h}x{w} frames",
            spec.patch_size
        )));
    }
    let seed = derive_seed(
        spec.seed,
        "merge-patch",
        &pair.scene_id,
        pair.frame_index as u64,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.patch_size;
    for _ in 0..spec.patches_per_frame {
        let y0 = rng.random_range(0..=h - p);
        let x0 = rng.random_range(0..=w - p);
        let spatial =
            |t: &ArrayD<T>| t.slice(s![.., .., y0..y0 + p, x0..x0 + p]).to_owned().into_dyn();
        out.push(PreparedPair {
            scene_id: pair.scene_id.clone(),
            frame_index: pair.frame_index,
            cur_input: spatial(&pair.cur_input),
            prev_input: spatial(&pair.prev_input),
            cur_target: spatial(&pair.cur_target),
            prev_target: spatial(&pair.prev_target),
            flow: pair
                .flow
                .slice(s![.., y0..y0 + p, x0..x0 + p, ..])
                .to_owned()
                .into_dyn(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_synthetic_dataset, SynthSpec};
    use hdrvid_core::dataio::{build_samples, ingest, IngestOptions, Split};
    use hdrvid_core::flow::PyramidalLucasKanade;
    use hdrvid_nn::models::{build_generator, GeneratorConfig};

    fn tiny_generator() -> hdrvid_nn::models::GeneratorModel<f64> {
        build_generator(
            &GeneratorConfig {
                base_channels: 4,
                n_resblocks: 1,
                ..GeneratorConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn sample_set(dir: &std::path::Path) -> Vec<SequenceSample<f64>> {
        write_synthetic_dataset(
            dir,
            &SynthSpec {
                scenes: 2,
                frames_per_scene: 4,
                height: 32,
                width: 32,
                ..SynthSpec::default()
            },
        )
        .unwrap();
        let manifest = ingest(
            dir,
            &IngestOptions {
                test_count: 1,
                ..IngestOptions::default()
            },
        )
        .unwrap();
        build_samples(&manifest, dir, Split::Train, None).unwrap()
    }

    #[test]
    fn pairs_are_consecutive_and_fully_assembled() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_set(dir.path());
        assert_eq!(samples.len(), 3, "4 frames give 3 samples");

        let generator = tiny_generator();
        let backend = PyramidalLucasKanade::default();
        let prep = MergePreprocessor {
            denoisers: None,
            flow_backend: &backend,
            generator: &generator,
            hdr_scale: 2.0,
            mu: 5000.0,
        };
        let pairs = prep.prepare_pairs(&samples, None).unwrap();
        // Samples sit at frames 1, 2, 3; only (1,2) and (2,3) pair up.
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].frame_index, 2);
        assert_eq!(pairs[1].frame_index, 3);
        for pair in &pairs {
            assert_eq!(pair.cur_input.shape(), &[1, 12, 32, 32]);
            assert_eq!(pair.prev_input.shape(), &[1, 12, 32, 32]);
            assert_eq!(pair.cur_target.shape(), &[1, 3, 32, 32]);
            assert_eq!(pair.flow.shape(), &[1, 32, 32, 2]);
            assert!(pair.cur_target.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        // The previous half of pair 1 is the current half of pair 0: same
        // frame, same preprocessing, so identical tensors.
        assert_eq!(pairs[1].prev_input, pairs[0].cur_input);
        assert_eq!(pairs[1].prev_target, pairs[0].cur_target);
    }

    #[test]
    fn patches_crop_all_rasters_at_shared_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_set(dir.path());
        let generator = tiny_generator();
        let backend = PyramidalLucasKanade::default();
        let prep = MergePreprocessor {
            denoisers: None,
            flow_backend: &backend,
            generator: &generator,
            hdr_scale: 2.0,
            mu: 5000.0,
        };
        let full = prep.prepare_pairs(&samples, None).unwrap();
        let spec = PatchSpec {
            patch_size: 16,
            patches_per_frame: 3,
            seed: 9,
        };
        let patched = prep.prepare_pairs(&samples, Some(&spec)).unwrap();
        assert_eq!(patched.len(), full.len() * 3);
        assert!(patched
            .iter()
            .all(|p| p.height() == 16 && p.width() == 16));

        // Every patch must be a window of the corresponding full pair at one
        // (y0, x0) shared by all rasters. Recover the offset from the target
        // and check the input at the same offset.
        let full0 = &full[0];
        let patch0 = &patched[0];
        let mut found = false;
        'search: for y0 in 0..=16 {
            for x0 in 0..=16 {
                let window = full0
                    .cur_target
                    .slice(s![.., .., y0..y0 + 16, x0..x0 + 16])
                    .into_dyn();
                if window == patch0.cur_target.view() {
                    assert_eq!(
                        full0
                            .cur_input
                            .slice(s![.., .., y0..y0 + 16, x0..x0 + 16])
                            .into_dyn(),
                        patch0.cur_input.view()
                    );
                    assert_eq!(
                        full0
                            .flow
                            .slice(s![.., y0..y0 + 16, x0..x0 + 16, ..])
                            .into_dyn(),
                        patch0.flow.view()
                    );
                    found = true;
                    break 'search;
                }
            }
        }
        assert!(found, "patch is not a window of the full-frame pair");
    }

    #[test]
    fn stacking_builds_contiguous_batches() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_set(dir.path());
        let generator = tiny_generator();
        let backend = PyramidalLucasKanade::default();
        let prep = MergePreprocessor {
            denoisers: None,
            flow_backend: &backend,
            generator: &generator,
            hdr_scale: 2.0,
            mu: 5000.0,
        };
        let pairs = prep.prepare_pairs(&samples, None).unwrap();
        let refs: Vec<&PreparedPair<f64>> = pairs.iter().collect();
        let batch = stack_pairs(&refs);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.cur_inputs.shape(), &[2, 12, 32, 32]);
        assert_eq!(batch.flow.shape(), &[2, 32, 32, 2]);
        assert_eq!(
            batch.cur_inputs.index_axis(Axis(0), 1),
            pairs[1].cur_input.index_axis(Axis(0), 0)
        );
    }
}
