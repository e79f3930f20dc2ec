//! Deterministic synthetic stand-in for a paired fMRI/image dataset.
//!
//! A latent scene code `s` drives everything: voxels `x_k = A_k s + noise`
//! for every subject, multi-hot object labels, bounded teacher tokens and a
//! grayscale stimulus image. Part of `s` only affects appearance, so semantic
//! targets alone cannot explain every pixel.

mod dataset;
mod world;

pub use dataset::{emit_dataset, load_dataset, Dataset, DatasetManifest, DatasetSpec, MANIFEST_FILE, SCHEMA_VERSION};
pub use world::{generate_world, GroundTruthWorld, WorldConfig, AVERAGED_REPETITION, CATEGORY_NAMES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mimevis::CaptionSet;
use crate::nncore::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    pub id: u64,
    /// Row-major `side x side` grayscale pixels in [0, 1].
    pub pixels: Vec<f64>,
    pub labels: Vec<bool>,
    pub captions: Option<CaptionSet>,
    /// `tokens x token_dim` teacher embedding.
    pub semantic_target: Tensor<f64>,
    pub scene: Vec<f64>,
}

impl Stimulus {
    pub fn object_names(&self, names: &[&str]) -> Vec<String> {
        self.labels
            .iter()
            .zip(names)
            .filter(|(on, _)| **on)
            .map(|(_, n)| n.to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmriSample {
    pub subject: usize,
    pub stimulus_id: u64,
    pub voxels: Vec<f64>,
    pub repetition: u32,
}

/// One stimulus and its response in every subject.
pub fn synthesize_sample(world: &GroundTruthWorld, scene_seed: u64, repetition: u32) -> Result<(Stimulus, Vec<FmriSample>)> {
    let scene = world.scene(scene_seed);
    let samples = (0..world.config.n_subjects)
        .map(|k| {
            Ok(FmriSample {
                subject: k,
                stimulus_id: scene_seed,
                voxels: world.voxels(k, scene_seed, repetition, &scene)?,
                repetition,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stimulus = Stimulus {
        id: scene_seed,
        pixels: world.image(&scene),
        labels: world.labels(&scene),
        captions: None,
        semantic_target: world.semantic_tokens(&scene),
        scene,
    };
    Ok((stimulus, samples))
}

/// Element-wise mean of repeated presentations of one stimulus to one subject.
pub fn average_test_repetitions(samples: &[FmriSample]) -> Result<FmriSample> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invariant("cannot average zero repetitions".into()))?;
    for s in samples {
        if s.subject != first.subject || s.stimulus_id != first.stimulus_id {
            return Err(Error::Invariant(format!(
                "mixed samples: subject {} / stimulus {} vs subject {} / stimulus {}",
                first.subject, first.stimulus_id, s.subject, s.stimulus_id
            )));
        }
        if s.voxels.len() != first.voxels.len() {
            return Err(Error::dim("average_test_repetitions", &[first.voxels.len()], &[s.voxels.len()]));
        }
    }
    if samples.len() == 1 {
        return Ok(first.clone());
    }
    let n = samples.len() as f64;
    let voxels = (0..first.voxels.len())
        .map(|v| samples.iter().map(|s| s.voxels[v]).sum::<f64>() / n)
        .collect();
    Ok(FmriSample {
        subject: first.subject,
        stimulus_id: first.stimulus_id,
        voxels,
        repetition: AVERAGED_REPETITION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> GroundTruthWorld {
        generate_world(&WorldConfig {
            noise_sigma: 0.0,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_voxels_are_exact_mixtures() {
        let w = noiseless();
        let (stim, samples) = synthesize_sample(&w, 11, 0).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.voxels, w.clean_voxels(s.subject, &stim.scene).unwrap());
            assert_eq!(s.voxels.len(), w.config.voxel_dims[s.subject]);
        }
        let (_, again) = synthesize_sample(&w, 11, 1).unwrap();
        assert_eq!(samples[2].voxels, again[2].voxels);
    }

    #[test]
    fn repetitions_differ_under_noise() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let (a, ra) = synthesize_sample(&w, 3, 0).unwrap();
        let (b, rb) = synthesize_sample(&w, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(ra[0].voxels, rb[0].voxels);
    }

    #[test]
    fn averaging_rules() {
        let s = |subject, stimulus_id, voxels: Vec<f64>| FmriSample {
            subject,
            stimulus_id,
            voxels,
            repetition: 0,
        };
        let one = s(0, 1, vec![1.0, 3.0]);
        assert_eq!(average_test_repetitions(&[one.clone()]).unwrap(), one);
        let avg = average_test_repetitions(&[one.clone(), s(0, 1, vec![3.0, 1.0])]).unwrap();
        assert_eq!(avg.voxels, vec![2.0, 2.0]);
        assert_eq!(avg.repetition, AVERAGED_REPETITION);
        assert!(matches!(
            average_test_repetitions(&[one.clone(), s(1, 1, vec![3.0, 1.0])]),
            Err(Error::Invariant(_))
        ));
        assert!(average_test_repetitions(&[one, s(0, 2, vec![3.0, 1.0])]).is_err());
    }
}
