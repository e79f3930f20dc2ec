use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{encode_tensor, hash_of};
use crate::nncore::{DType, Tensor};
use crate::rng;

/// Upper-tail standard normal quantile for 20% prevalence.
const PREVALENCE_QUANTILE: f64 = 0.841_621_233_572_914_3;

/// Repetition index given to an averaged sample.
pub const AVERAGED_REPETITION: u32 = u32::MAX;

pub const CATEGORY_NAMES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub voxel_dims: Vec<usize>,
    /// Total scene-code width.
    pub scene_dim: usize,
    /// Trailing scene dimensions that only affect appearance (pixels), not
    /// semantics or labels.
    pub appearance_dims: usize,
    /// Peak pixel amplitude of each appearance grating.
    pub appearance_amplitude: f64,
    pub n_categories: usize,
    pub image_side: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            voxel_dims: vec![120, 140, 100, 160],
            scene_dim: 24,
            appearance_dims: 8,
            appearance_amplitude: 0.04,
            n_categories: 16,
            image_side: 16,
            token_count: 8,
            token_dim: 32,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("scene_dim", self.scene_dim),
            ("n_categories", self.n_categories),
            ("image_side", self.image_side),
            ("token_count", self.token_count),
            ("token_dim", self.token_dim),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.voxel_dims.len() != self.n_subjects {
            return Err(Error::config(
                "voxel_dims",
                format!("{} entries for {} subjects", self.voxel_dims.len(), self.n_subjects),
            ));
        }
        if self.voxel_dims.contains(&0) {
            return Err(Error::config("voxel_dims", "every subject needs >= 1 voxel"));
        }
        if self.appearance_dims >= self.scene_dim {
            return Err(Error::config("appearance_dims", "must leave at least one semantic dimension"));
        }
        if self.n_categories > CATEGORY_NAMES.len() {
            return Err(Error::config("n_categories", format!("at most {} categories", CATEGORY_NAMES.len())));
        }
        if !(self.appearance_amplitude >= 0.0 && self.appearance_amplitude.is_finite()) {
            return Err(Error::config("appearance_amplitude", "must be finite and >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn semantic_dims(&self) -> usize {
        self.scene_dim - self.appearance_dims
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn category_names(&self) -> &'static [&'static str] {
        &CATEGORY_NAMES[..self.n_categories]
    }
}

/// Fixed generative maps linking scene codes to voxels, labels, teacher
/// tokens and pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWorld {
    pub config: WorldConfig,
    /// Per subject, `Z_k x scene_dim`.
    pub mixing: Vec<Tensor<f64>>,
    /// `(tokens * token_dim) x semantic_dims`.
    pub semantic_weight: Tensor<f64>,
    pub semantic_bias: Tensor<f64>,
    /// `pixels x scene_dim`, plus a constant offset per pixel.
    pub image_basis: Tensor<f64>,
    pub image_offset: Tensor<f64>,
    /// `categories x semantic_dims`.
    pub label_weight: Tensor<f64>,
    pub label_threshold: Vec<f64>,
}

fn gaussian(rng: &mut rng::Stream) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_world(config: &WorldConfig) -> Result<GroundTruthWorld> {
    config.validate()?;
    let seed = config.seed;
    let g = config.scene_dim;
    let gs = config.semantic_dims();

    let mixing = config
        .voxel_dims
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let mut r = rng::stream(seed, "world.mixing", &[k as u64]);
            let std = 1.0 / (g as f64).sqrt();
            Tensor::from_fn(&[z, g], |_| gaussian(&mut r) * std)
        })
        .collect();

    let width = config.token_count * config.token_dim;
    let mut r = rng::stream(seed, "world.semantic", &[]);
    let std = 1.0 / (gs as f64).sqrt();
    let semantic_weight = Tensor::from_fn(&[width, gs], |_| gaussian(&mut r) * std);
    let semantic_bias = Tensor::from_fn(&[width], |_| gaussian(&mut r) * 0.1);

    let (image_basis, image_offset) = image_maps(config);

    let mut r = rng::stream(seed, "world.labels", &[]);
    let label_weight = Tensor::from_fn(&[config.n_categories, gs], |_| gaussian(&mut r));
    let label_threshold = (0..config.n_categories)
        .map(|c| {
            let norm = label_weight.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            PREVALENCE_QUANTILE * norm
        })
        .collect();

    Ok(GroundTruthWorld {
        config: config.clone(),
        mixing,
        semantic_weight,
        semantic_bias,
        image_basis,
        image_offset,
        label_weight,
        label_threshold,
    })
}

/// Semantic dimensions drive localised blobs, appearance dimensions drive
/// low-frequency gratings.
fn image_maps(config: &WorldConfig) -> (Tensor<f64>, Tensor<f64>) {
    let side = config.image_side;
    let g = config.scene_dim;
    let gs = config.semantic_dims();
    let mut r = rng::stream(config.seed, "world.image", &[]);
    let mut basis = Tensor::zeros(&[side * side, g]);
    let s = side as f64;
    for d in 0..g {
        if d < gs {
            let cx = r.random_range(0.15..0.85) * s;
            let cy = r.random_range(0.15..0.85) * s;
            let width = r.random_range(0.1..0.22) * s;
            for y in 0..side {
                for x in 0..side {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let v = 0.16 * (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                    basis.data_mut()[(y * side + x) * g + d] = v;
                }
            }
        } else {
            let fx = r.random_range(0.5..2.0);
            let fy = r.random_range(-2.0..2.0);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            for y in 0..side {
                for x in 0..side {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s + phase;
                    basis.data_mut()[(y * side + x) * g + d] = config.appearance_amplitude * arg.cos();
                }
            }
        }
    }
    let offset = Tensor::full(&[side * side], 0.5);
    (basis, offset)
}

impl GroundTruthWorld {
    pub fn scene(&self, scene_seed: u64) -> Vec<f64> {
        let mut r = rng::stream(self.config.seed, "scene", &[scene_seed]);
        (0..self.config.scene_dim).map(|_| gaussian(&mut r)).collect()
    }

    /// Noise-free voxel response `A_k s`.
    pub fn clean_voxels(&self, subject: usize, scene: &[f64]) -> Result<Vec<f64>> {
        let a = self.mixing.get(subject).ok_or_else(|| Error::Lookup {
            kind: "subject",
            key: subject.to_string(),
        })?;
        Ok((0..a.rows()).map(|v| dot(a.row(v), scene)).collect())
    }

    pub fn voxels(&self, subject: usize, scene_seed: u64, repetition: u32, scene: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.clean_voxels(subject, scene)?;
        let sigma = self.config.noise_sigma;
        if sigma > 0.0 {
            let mut r = rng::stream(
                self.config.seed,
                "noise",
                &[scene_seed, subject as u64, u64::from(repetition)],
            );
            for v in &mut x {
                *v += sigma * gaussian(&mut r);
            }
        }
        Ok(x)
    }

    /// Teacher tokens `tanh(W s_sem + b)`, `tokens x token_dim`.
    pub fn semantic_tokens(&self, scene: &[f64]) -> Tensor<f64> {
        let gs = self.config.semantic_dims();
        let w = &self.semantic_weight;
        let data = (0..w.rows())
            .map(|i| (dot(w.row(i), &scene[..gs]) + self.semantic_bias.data()[i]).tanh())
            .collect();
        Tensor::new(vec![self.config.token_count, self.config.token_dim], data).expect("token grid")
    }

    pub fn image(&self, scene: &[f64]) -> Vec<f64> {
        let b = &self.image_basis;
        (0..b.rows())
            .map(|p| (self.image_offset.data()[p] + dot(b.row(p), scene)).clamp(0.0, 1.0))
            .collect()
    }

    /// Label scores `(W s)_c - threshold_c`.
    pub fn label_margins(&self, scene: &[f64]) -> Vec<f64> {
        let gs = self.config.semantic_dims();
        (0..self.config.n_categories)
            .map(|c| dot(self.label_weight.row(c), &scene[..gs]) - self.label_threshold[c])
            .collect()
    }

    /// Multi-hot labels; if no score clears its threshold, the category with
    /// the largest normalised margin is switched on.
    pub fn labels(&self, scene: &[f64]) -> Vec<bool> {
        let margins = self.label_margins(scene);
        let mut on: Vec<bool> = margins.iter().map(|&m| m > 0.0).collect();
        if !on.iter().any(|&b| b) {
            let best = margins
                .iter()
                .enumerate()
                .map(|(c, &m)| (c, m / self.label_threshold[c].max(1e-12)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            on[best] = true;
        }
        on
    }

    /// Canonical byte serialisation of every map (used to check determinism).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.config).expect("config serialises");
        for t in self
            .mixing
            .iter()
            .chain([&self.semantic_weight, &self.semantic_bias, &self.image_basis, &self.image_offset, &self.label_weight])
        {
            out.extend(encode_tensor(t, DType::F64));
        }
        for t in &self.label_threshold {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_name_the_field() {
        let cfg = WorldConfig {
            voxel_dims: vec![10, 10],
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config { ref field, .. }) if field == "voxel_dims"));
        let cfg = WorldConfig {
            noise_sigma: -1.0,
            ..WorldConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "noise_sigma"));
        let cfg = WorldConfig {
            token_dim: 0,
            ..WorldConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shapes_follow_config() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.mixing[0].shape(), &[120, 24]);
        assert_eq!(w.mixing[3].shape(), &[160, 24]);
        let s = w.scene(5);
        assert_eq!(w.semantic_tokens(&s).shape(), &[8, 32]);
        assert_eq!(w.image(&s).len(), 256);
    }

    #[test]
    fn outputs_are_bounded() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for seed in 0..50 {
            let s = w.scene(seed);
            assert!(w.semantic_tokens(&s).data().iter().all(|v| v.abs() < 1.0));
            assert!(w.image(&s).iter().all(|v| (0.0..=1.0).contains(v)));
            let labels = w.labels(&s);
            assert!(labels.iter().any(|&b| b));
        }
    }

    #[test]
    fn label_prevalence_is_near_twenty_percent() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let n = 4000;
        let mut on = 0usize;
        for seed in 0..n {
            on += w.labels(&w.scene(seed)).iter().filter(|&&b| b).count();
        }
        let rate = on as f64 / (n as f64 * 16.0);
        assert!((rate - 0.2).abs() < 0.03, "prevalence {rate}");
    }
}
