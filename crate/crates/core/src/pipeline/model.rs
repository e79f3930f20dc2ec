use crate::error::{Error, Result};
use crate::nncore::{Bound, CausalTransformer, Linear, Mlp, ParamSet, Real, ResidualBlock, Tape, Tensor, Var};
use crate::pipeline::config::{Mode, ModelConfig, ModelShape};
use crate::rng;

#[derive(Debug, Clone)]
pub struct SsvModule {
    pub encoder: Mlp,
    pub prior: CausalTransformer,
    pub assist_pixels: Linear,
    pub assist_features: Linear,
}

/// The encoder stack: per-subject mappers into a shared latent, the semantic
/// encoder with its prior and, in full mode, the visual encoder.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub mode: Mode,
    pub params: ParamSet<T>,
    pub swm: Vec<Linear>,
    pub classifier: Linear,
    pub sse_blocks: Vec<ResidualBlock>,
    pub sse_out: Linear,
    pub sse_prior: CausalTransformer,
    pub ssv: Option<SsvModule>,
}

/// Voxel rows of one subject.
#[derive(Debug, Clone)]
pub struct SubjectBatch<T> {
    pub subject: usize,
    pub voxels: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct VisualVars {
    /// `x'_v`.
    pub encoded: Var,
    /// `x''_v`.
    pub refined: Var,
    pub assist_pixels: Var,
    pub assist_features: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `x'`, rows in subject-group order.
    pub latent: Var,
    pub probs: Var,
    /// Encoder tokens before the prior, flattened per row.
    pub encoded: Var,
    /// `x''`.
    pub denoised: Var,
    pub visual: Option<VisualVars>,
}

impl<T: Real> Model<T> {
    pub fn new(shape: &ModelShape, config: &ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate(shape)?;
        let mut params = ParamSet::new();
        let d = config.latent_dim;
        let mut r = rng::stream(seed, "model-init", &[]);
        let swm = shape
            .voxel_dims
            .iter()
            .enumerate()
            .map(|(k, &z)| Linear::new(&mut params, &format!("swm.subject{k}"), z, d, 1.0, &mut r))
            .collect();
        let classifier = Linear::new(&mut params, "swm.classifier", d, shape.n_categories, 1.0, &mut r);
        let sse_blocks = (0..config.sse_blocks)
            .map(|i| ResidualBlock::new(&mut params, &format!("sse.block{i}"), d, config.activation, &mut r))
            .collect();
        let sse_out = Linear::new(&mut params, "sse.out", d, shape.semantic_width(), 1.0, &mut r);
        let sse_prior = CausalTransformer::new(
            &mut params,
            "sse.prior",
            shape.token_count,
            shape.token_dim,
            config.prior_layers,
            config.heads,
            config.head_dim,
            &mut r,
        );
        let ssv = match mode {
            Mode::SemanticOnly => None,
            Mode::Full => {
                let width = config.visual_tokens * config.visual_dim;
                let mut dims = vec![d];
                dims.extend(std::iter::repeat_n(config.ssv_width, config.ssv_layers - 1));
                dims.push(width);
                let encoder = Mlp::new(&mut params, "ssv.encoder", &dims, config.activation, &mut r);
                let prior = CausalTransformer::new(
                    &mut params,
                    "ssv.prior",
                    config.visual_tokens,
                    config.visual_dim,
                    config.visual_prior_layers,
                    config.heads,
                    config.head_dim,
                    &mut r,
                );
                let pooled = config.pooled_side * config.pooled_side;
                let assist_pixels = Linear::new(&mut params, "ssv.assist_pixels", width, pooled, 1.0, &mut r);
                let assist_features =
                    Linear::new(&mut params, "ssv.assist_features", width, shape.deep_a_dim, 1.0, &mut r);
                Some(SsvModule {
                    encoder,
                    prior,
                    assist_pixels,
                    assist_features,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            shape: shape.clone(),
            mode,
            params,
            swm,
            classifier,
            sse_blocks,
            sse_out,
            sse_prior,
            ssv,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.swm.len()
    }

    fn mapper(&self, subject: usize) -> Result<&Linear> {
        self.swm.get(subject).ok_or_else(|| Error::Lookup {
            kind: "subject",
            key: subject.to_string(),
        })
    }

    /// `x'` for the concatenated subject groups.
    pub fn swm_forward(&self, tape: &mut Tape<T>, bound: &Bound, groups: &[SubjectBatch<T>]) -> Result<Var> {
        let mut parts = Vec::with_capacity(groups.len());
        for g in groups {
            let map = self.mapper(g.subject)?;
            if g.voxels.cols() != map.in_dim {
                return Err(Error::dim("swm_forward", &[map.in_dim], g.voxels.shape()));
            }
            let x = tape.constant(g.voxels.clone());
            parts.push(map.forward(tape, bound, x)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat_rows(&parts)
    }

    pub fn swm_classify(&self, tape: &mut Tape<T>, bound: &Bound, latent: Var) -> Result<Var> {
        let logits = self.classifier.forward(tape, bound, latent)?;
        Ok(tape.sigmoid(logits))
    }

    /// Encoder tokens `Phi_omega(x')`, flattened per row.
    pub fn sse_encode(&self, tape: &mut Tape<T>, bound: &Bound, latent: Var) -> Result<Var> {
        let mut h = latent;
        for b in &self.sse_blocks {
            h = b.forward(tape, bound, h)?;
        }
        self.sse_out.forward(tape, bound, h)
    }

    /// `(encoded, x'')`.
    pub fn sse_forward(&self, tape: &mut Tape<T>, bound: &Bound, latent: Var) -> Result<(Var, Var)> {
        let encoded = self.sse_encode(tape, bound, latent)?;
        let denoised = self.sse_prior.forward(tape, bound, encoded)?;
        Ok((encoded, denoised))
    }

    pub fn ssv_forward(&self, tape: &mut Tape<T>, bound: &Bound, latent: Var) -> Result<VisualVars> {
        let ssv = self
            .ssv
            .as_ref()
            .ok_or_else(|| Error::Mode("the visual encoder does not exist in semantic_only mode".into()))?;
        let encoded = ssv.encoder.forward(tape, bound, latent)?;
        let refined = ssv.prior.forward(tape, bound, encoded)?;
        let assist_pixels = ssv.assist_pixels.forward(tape, bound, encoded)?;
        let assist_features = ssv.assist_features.forward(tape, bound, encoded)?;
        Ok(VisualVars {
            encoded,
            refined,
            assist_pixels,
            assist_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, groups: &[SubjectBatch<T>]) -> Result<ForwardVars> {
        let latent = self.swm_forward(tape, bound, groups)?;
        let probs = self.swm_classify(tape, bound, latent)?;
        let (encoded, denoised) = self.sse_forward(tape, bound, latent)?;
        let visual = match self.mode {
            Mode::Full => Some(self.ssv_forward(tape, bound, latent)?),
            Mode::SemanticOnly => None,
        };
        Ok(ForwardVars {
            latent,
            probs,
            encoded,
            denoised,
            visual,
        })
    }
}

/// Inference result for one subject's voxel rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub latent: Tensor<T>,
    pub probs: Tensor<T>,
    /// `x''`, `rows x (tokens * token_dim)`.
    pub semantic: Tensor<T>,
    /// `x''_v`; present only for full-mode models.
    pub visual: Option<Tensor<T>>,
}

pub fn infer<T: Real>(model: &Model<T>, voxels: &Tensor<T>, subject: usize) -> Result<Inference<T>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_| false);
    let groups = [SubjectBatch {
        subject,
        voxels: voxels.clone(),
    }];
    let latent = model.swm_forward(&mut tape, &bound, &groups)?;
    let probs = model.swm_classify(&mut tape, &bound, latent)?;
    let (_, denoised) = model.sse_forward(&mut tape, &bound, latent)?;
    let visual = match model.ssv {
        Some(ref ssv) => {
            let enc = ssv.encoder.forward(&mut tape, &bound, latent)?;
            let refined = ssv.prior.forward(&mut tape, &bound, enc)?;
            Some(tape.value(refined).clone())
        }
        None => None,
    };
    Ok(Inference {
        latent: tape.value(latent).clone(),
        probs: tape.value(probs).clone(),
        semantic: tape.value(denoised).clone(),
        visual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::WorldConfig;

    fn small() -> (ModelShape, ModelConfig) {
        let shape = ModelShape::from_world(&WorldConfig {
            voxel_dims: vec![7, 9, 5, 6],
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            latent_dim: 8,
            ssv_layers: 3,
            ssv_width: 8,
            ..Default::default()
        };
        (shape, cfg)
    }

    #[test]
    fn zero_mapper_gives_zero_latent() {
        let (shape, cfg) = small();
        let mut m = Model::<f64>::new(&shape, &cfg, Mode::Full, 0).unwrap();
        let w = m.swm[1].weight;
        *m.params.get_mut(w) = Tensor::zeros(&[9, 8]);
        let out = infer(&m, &Tensor::full(&[3, 9], 0.7), 1).unwrap();
        assert!(out.latent.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.semantic.shape(), &[3, 256]);
        assert_eq!(out.visual.unwrap().shape(), &[3, 512]);
        assert!(out.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn semantic_only_has_no_visual_parameters() {
        let (shape, cfg) = small();
        let m = Model::<f64>::new(&shape, &cfg, Mode::SemanticOnly, 0).unwrap();
        assert!(m.params.iter().all(|(_, n, _)| !n.starts_with("ssv.")));
        let out = infer(&m, &Tensor::full(&[2, 7], 0.1), 0).unwrap();
        assert!(out.visual.is_none());
        let mut tape = Tape::new();
        let b = m.params.bind_all(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 8]));
        assert!(matches!(m.ssv_forward(&mut tape, &b, x), Err(Error::Mode(_))));
    }

    #[test]
    fn unknown_subject_and_bad_width() {
        let (shape, cfg) = small();
        let m = Model::<f64>::new(&shape, &cfg, Mode::SemanticOnly, 0).unwrap();
        assert!(matches!(infer(&m, &Tensor::zeros(&[1, 7]), 9), Err(Error::Lookup { .. })));
        assert!(matches!(infer(&m, &Tensor::zeros(&[1, 8]), 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn inference_is_repeatable() {
        let (shape, cfg) = small();
        let m = Model::<f64>::new(&shape, &cfg, Mode::Full, 3).unwrap();
        let x = Tensor::from_fn(&[4, 6], |i| (i as f64).cos());
        assert_eq!(infer(&m, &x, 3).unwrap(), infer(&m, &x, 3).unwrap());
    }
}
