use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::hash_of;
use crate::losses::{LossWeights, DEFAULT_TEMPERATURE};
use crate::metrics::{ExtractorKind, FeatureExtractor};
use crate::mimevis::Granularity;
use crate::nncore::Activation;
use crate::synthdata::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Semantic path only; no visual encoder exists.
    SemanticOnly,
    Full,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::SemanticOnly => "SynMind*",
            Mode::Full => "SynMind",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic_only" => Ok(Mode::SemanticOnly),
            "full" => Ok(Mode::Full),
            _ => Err(Error::config("mode", format!("`{s}` is not semantic_only or full"))),
        }
    }
}

/// Widths and depths of every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared latent width `d`.
    pub latent_dim: usize,
    /// Residual blocks before the token projection.
    pub sse_blocks: usize,
    pub prior_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Linear layers in the visual encoder MLP.
    pub ssv_layers: usize,
    pub ssv_width: usize,
    pub visual_tokens: usize,
    pub visual_dim: usize,
    pub visual_prior_layers: usize,
    /// Side of the average-pooled image the first assist head predicts.
    pub pooled_side: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            sse_blocks: 3,
            prior_layers: 2,
            heads: 4,
            head_dim: 8,
            ssv_layers: 8,
            ssv_width: 64,
            visual_tokens: 16,
            visual_dim: 32,
            visual_prior_layers: 2,
            pooled_side: 8,
            activation: Activation::Gelu,
        }
    }
}

/// Data-dependent sizes the model is built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub voxel_dims: Vec<usize>,
    pub n_categories: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub image_side: usize,
    pub deep_a_dim: usize,
    pub deep_b_dim: usize,
}

impl ModelShape {
    pub fn from_world(world: &WorldConfig) -> Result<Self> {
        Ok(Self {
            voxel_dims: world.voxel_dims.clone(),
            n_categories: world.n_categories,
            token_count: world.token_count,
            token_dim: world.token_dim,
            image_side: world.image_side,
            deep_a_dim: FeatureExtractor::new(ExtractorKind::DeepA, world.image_side)?.output_dim(),
            deep_b_dim: FeatureExtractor::new(ExtractorKind::DeepB, world.image_side)?.output_dim(),
        })
    }

    pub fn semantic_width(&self) -> usize {
        self.token_count * self.token_dim
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

impl ModelConfig {
    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ssv_layers", self.ssv_layers),
            ("ssv_width", self.ssv_width),
            ("visual_tokens", self.visual_tokens),
            ("visual_dim", self.visual_dim),
            ("pooled_side", self.pooled_side),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.visual_tokens * self.visual_dim != shape.deep_b_dim {
            return Err(Error::config(
                "visual_tokens",
                format!(
                    "visual grid {}x{} must match the deep-B embedding width {}",
                    self.visual_tokens, self.visual_dim, shape.deep_b_dim
                ),
            ));
        }
        if shape.image_side % self.pooled_side != 0 {
            return Err(Error::config("pooled_side", "must divide the image side"));
        }
        Ok(())
    }
}

pub const FREEZABLE: [&str; 3] = ["swm", "sse", "ssv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub mixco: bool,
    /// Caption level the semantic targets follow.
    pub granularity: Granularity,
    /// Module prefixes (`swm`, `sse`, `ssv`) whose parameters stay fixed.
    pub freeze: Vec<String>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 64,
            epochs: 20,
            base_lr: 1e-3,
            min_lr: 0.0,
            seed: 0,
            mode: Mode::Full,
            mixco: false,
            granularity: Granularity::Words(75),
            freeze: Vec::new(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "contrastive terms need at least 2 rows per batch"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::config("base_lr", "need 0 <= min_lr <= base_lr and base_lr > 0"));
        }
        for f in &self.freeze {
            if !FREEZABLE.contains(&f.as_str()) {
                return Err(Error::config("freeze", format!("unknown module `{f}`")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn trainable(&self, param: &str) -> bool {
        !self.freeze.iter().any(|f| param.starts_with(&format!("{f}.")))
    }
}
