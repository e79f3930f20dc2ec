//! Image renderers conditioned on the semantic embedding and, optionally,
//! the visual embedding.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_json, write_json};
use crate::imageio::write_png;
use crate::losses::squared_error_on;
use crate::nncore::{Activation, Adam, AdamConfig, Bound, Mlp, ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::pipeline::{dtype_name, gather_rows, infer, load_params, save_params, Mode, Model, ParamEntry, TrainingData};
use crate::rng;

pub const RENDERER_FILE: &str = "renderer.json";
pub const RENDERER_SCHEMA: u32 = 1;

/// Anything that turns embeddings into a `side x side` image in [0, 1].
pub trait Renderer {
    fn side(&self) -> usize;
    fn render(&self, semantic: &[f64], visual: Option<&[f64]>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RendererConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    /// Build the visual branch; ignored when the pairs carry no visual input.
    pub use_visual: bool,
    /// Train on ground-truth targets instead of pipeline embeddings.
    pub teacher_forcing: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 20,
            batch_size: 64,
            base_lr: 2e-3,
            seed: 0,
            use_visual: true,
            teacher_forcing: false,
        }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("renderer", "hidden, epochs and batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("renderer.base_lr", "must be positive"));
        }
        Ok(())
    }
}

/// Training pairs: embeddings row-aligned with stimulus pixels.
#[derive(Debug, Clone)]
pub struct RenderPairs {
    pub semantic: Tensor<f64>,
    pub visual: Option<Tensor<f64>>,
    pub pixels: Tensor<f64>,
}

impl RenderPairs {
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels.rows();
        if self.semantic.rows() != n {
            return Err(Error::dim("render_pairs", self.semantic.shape(), self.pixels.shape()));
        }
        if let Some(v) = &self.visual {
            if v.rows() != n {
                return Err(Error::dim("render_pairs", v.shape(), self.pixels.shape()));
            }
        }
        let side = (self.pixels.cols() as f64).sqrt() as usize;
        if side * side != self.pixels.cols() || n == 0 {
            return Err(Error::dim("render_pairs", &[side, side], self.pixels.shape()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ground-truth targets and deep-B features of the training stimuli.
    pub fn teacher_forced(data: &TrainingData, with_visual: bool) -> Self {
        let t = &data.table;
        Self {
            semantic: t.targets.clone(),
            visual: with_visual.then(|| t.deep_b.clone()),
            pixels: t.pixels.clone(),
        }
    }

    /// Encoder outputs for every training `(subject, stimulus)` sample.
    pub fn from_pipeline<T: Real>(model: &Model<T>, data: &TrainingData) -> Result<Self> {
        let mut sem = Vec::new();
        let mut vis = Vec::new();
        let mut pix = Vec::new();
        for (k, vox) in data.voxels.iter().enumerate() {
            let out = infer(model, &vox.cast(), k)?;
            let s: Tensor<f64> = out.semantic.cast();
            for r in 0..s.rows() {
                sem.push(s.row(r).to_vec());
                pix.push(data.table.pixels.row(r).to_vec());
            }
            if let Some(v) = out.visual {
                let v: Tensor<f64> = v.cast();
                vis.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
            }
        }
        Ok(Self {
            semantic: Tensor::from_rows(&sem)?,
            visual: match model.mode {
                Mode::Full => Some(Tensor::from_rows(&vis)?),
                Mode::SemanticOnly => None,
            },
            pixels: Tensor::from_rows(&pix)?,
        })
    }
}

/// Trainable decoder: an MLP over the semantic embedding plus an optional
/// MLP over the visual embedding, fused by a learned scalar gate.
#[derive(Debug, Clone)]
pub struct DecoderRenderer<T> {
    pub config: RendererConfig,
    pub side: usize,
    pub semantic_width: usize,
    pub visual_width: Option<usize>,
    pub params: ParamSet<T>,
    pub semantic: Mlp,
    pub visual: Option<Mlp>,
    pub gate: ParamId,
}

/// Initial visual gate.
pub const GATE_INIT: f64 = 0.5;

impl<T: Real> DecoderRenderer<T> {
    pub fn new(config: &RendererConfig, side: usize, semantic_width: usize, visual_width: Option<usize>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::stream(config.seed, "renderer-init", &[]);
        let pixels = side * side;
        let semantic = Mlp::new(&mut params, "decoder.semantic", &[semantic_width, config.hidden, pixels], Activation::Gelu, &mut r);
        let visual_width = visual_width.filter(|_| config.use_visual);
        let visual = visual_width
            .map(|w| Mlp::new(&mut params, "decoder.visual", &[w, config.hidden, pixels], Activation::Gelu, &mut r));
        let gate = params.add("decoder.gate", Tensor::full(&[1, 1], T::lit(GATE_INIT)));
        Ok(Self {
            config: config.clone(),
            side,
            semantic_width,
            visual_width,
            params,
            semantic,
            visual,
            gate,
        })
    }

    pub fn has_visual(&self) -> bool {
        self.visual.is_some()
    }

    /// Output probabilities for a batch; `visual` is read only when the
    /// visual branch exists.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, semantic: Var, visual: Option<Var>) -> Result<Var> {
        let mut pre = self.semantic.forward(tape, bound, semantic)?;
        if let (Some(branch), Some(v)) = (&self.visual, visual) {
            let h = branch.forward(tape, bound, v)?;
            let (rows, cols) = (tape.value(h).rows(), tape.value(h).cols());
            let flat = tape.reshape(h, &[rows * cols, 1])?;
            let gated = tape.matmul(flat, bound.var(self.gate))?;
            let gated = tape.reshape(gated, &[rows, cols])?;
            pre = tape.add(pre, gated)?;
        }
        Ok(tape.sigmoid(pre))
    }

    /// Render a batch of rows.
    pub fn render_rows(&self, semantic: &Tensor<f64>, visual: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        if semantic.cols() != self.semantic_width {
            return Err(Error::dim("render", &[self.semantic_width], semantic.shape()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let s = tape.constant(semantic.cast());
        let v = match (self.visual_width, visual) {
            (Some(w), Some(v)) => {
                if v.cols() != w || v.rows() != semantic.rows() {
                    return Err(Error::dim("render", &[semantic.rows(), w], v.shape()));
                }
                Some(tape.constant(v.cast()))
            }
            _ => None,
        };
        let out = self.forward(&mut tape, &bound, s, v)?;
        Ok(tape.value(out).cast())
    }

    pub fn set_gate(&mut self, value: f64) {
        *self.params.get_mut(self.gate) = Tensor::full(&[1, 1], T::lit(value));
    }
}

impl<T: Real> Renderer for DecoderRenderer<T> {
    fn side(&self) -> usize {
        self.side
    }

    fn render(&self, semantic: &[f64], visual: Option<&[f64]>) -> Result<Vec<f64>> {
        let s = Tensor::new(vec![1, semantic.len()], semantic.to_vec())?;
        let v = visual.map(|v| Tensor::new(vec![1, v.len()], v.to_vec())).transpose()?;
        Ok(self.render_rows(&s, v.as_ref())?.into_data())
    }
}

/// Fit a decoder to `pairs` with pixel MSE. Returns the renderer and the
/// mean training loss of each epoch.
pub fn train_decoder<T: Real>(pairs: &RenderPairs, config: &RendererConfig) -> Result<(DecoderRenderer<T>, Vec<f64>)> {
    pairs.validate()?;
    let side = (pairs.pixels.cols() as f64).sqrt() as usize;
    let mut dec = DecoderRenderer::<T>::new(config, side, pairs.semantic.cols(), pairs.visual.as_ref().map(|v| v.cols()))?;
    let n = pairs.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let mut adam = Adam::new(
        AdamConfig {
            base_lr: config.base_lr,
            min_lr: 0.0,
            total_steps: per_epoch * config.epochs,
            ..Default::default()
        },
        &dec.params,
    );
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, "renderer-epoch", &[epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = dec.params.bind_all(&mut tape);
            let s = tape.constant(gather_rows(&pairs.semantic, chunk).cast());
            let v = match (&dec.visual, &pairs.visual) {
                (Some(_), Some(v)) => Some(tape.constant(gather_rows(v, chunk).cast())),
                _ => None,
            };
            let out = dec.forward(&mut tape, &bound, s, v)?;
            let loss = squared_error_on(&mut tape, out, &gather_rows(&pairs.pixels, chunk).cast())?;
            let value = tape.scalar(loss).f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step: adam.steps_taken(),
                    reason: format!("non-finite renderer loss {value}"),
                });
            }
            total += value * chunk.len() as f64 / n as f64;
            let grads = tape.backward(loss)?;
            adam.step_from(&mut dec.params, bound.vars(), &grads)?;
        }
        losses.push(total);
    }
    Ok((dec, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RendererManifest {
    pub schema_version: u32,
    pub kind: String,
    pub dtype: String,
    pub config: RendererConfig,
    pub side: usize,
    pub semantic_width: usize,
    pub visual_width: Option<usize>,
    pub params: Vec<ParamEntry>,
}

pub fn save_renderer<T: Real>(dir: &Path, dec: &DecoderRenderer<T>) -> Result<RendererManifest> {
    let m = RendererManifest {
        schema_version: RENDERER_SCHEMA,
        kind: "renderer".into(),
        dtype: dtype_name(T::DTYPE).into(),
        config: dec.config.clone(),
        side: dec.side,
        semantic_width: dec.semantic_width,
        visual_width: dec.visual_width,
        params: save_params(dir, &dec.params)?,
    };
    write_json(&dir.join(RENDERER_FILE), &m)?;
    Ok(m)
}

pub fn load_renderer<T: Real>(dir: &Path) -> Result<DecoderRenderer<T>> {
    let m: RendererManifest = read_json(&dir.join(RENDERER_FILE))?;
    if m.schema_version != RENDERER_SCHEMA || m.kind != "renderer" {
        return Err(Error::format("renderer", "not a renderer checkpoint of a supported schema"));
    }
    let mut dec = DecoderRenderer::new(&m.config, m.side, m.semantic_width, m.visual_width)?;
    load_params(dir, &m.params, &mut dec.params)?;
    Ok(dec)
}

/// Write `recon_<id>.png` plus the raw floats as `recon_<id>.bin`.
pub fn write_renders(dir: &Path, ids: &[u64], images: &[Vec<f64>], side: usize) -> Result<()> {
    if ids.len() != images.len() {
        return Err(Error::dim("write_renders", &[ids.len()], &[images.len()]));
    }
    for (id, img) in ids.iter().zip(images) {
        write_png(&dir.join(format!("recon_{id}.png")), img, side)?;
        let t = Tensor::new(vec![side, side], img.clone())?;
        crate::format::write_tensor(&dir.join(format!("recon_{id}.bin")), &t, crate::nncore::DType::F32)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize, visual: bool) -> RenderPairs {
        let semantic = Tensor::from_fn(&[n, 6], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        let pixels = Tensor::from_fn(&[n, 16], |i| ((i * 3) % 5) as f64 / 4.0);
        RenderPairs {
            visual: visual.then(|| Tensor::from_fn(&[n, 4], |i| (i as f64).sin())),
            semantic,
            pixels,
        }
    }

    #[test]
    fn zero_weights_render_the_bias_image() {
        let cfg = RendererConfig::default();
        let mut dec = DecoderRenderer::<f64>::new(&cfg, 4, 6, None).unwrap();
        let last = dec.semantic.layers.last().unwrap().clone();
        *dec.params.get_mut(last.weight) = Tensor::zeros(&[cfg.hidden, 16]);
        *dec.params.get_mut(last.bias) = Tensor::full(&[1, 16], 0.3);
        let img = dec.render(&[0.9, -0.1, 0.4, 0.0, 1.0, 2.0], None).unwrap();
        let expect = 1.0 / (1.0 + (-0.3f64).exp());
        assert!(img.iter().all(|&p| (p - expect).abs() < 1e-15));
    }

    #[test]
    fn gate_off_ignores_visual_input() {
        let mut dec = DecoderRenderer::<f64>::new(&RendererConfig::default(), 4, 6, Some(4)).unwrap();
        dec.set_gate(0.0);
        let s = [0.1, 0.2, -0.3, 0.0, 0.5, 0.7];
        let a = dec.render(&s, Some(&[1.0, -2.0, 3.0, 0.5])).unwrap();
        let b = dec.render(&s, None).unwrap();
        assert_eq!(a, b);
        dec.set_gate(1.0);
        assert_ne!(dec.render(&s, Some(&[1.0, -2.0, 3.0, 0.5])).unwrap(), b);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = RendererConfig {
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        };
        let p = pairs(40, true);
        let (a, la) = train_decoder::<f64>(&p, &cfg).unwrap();
        let (b, lb) = train_decoder::<f64>(&p, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.render_rows(&p.semantic, p.visual.as_ref()).unwrap(), b.render_rows(&p.semantic, p.visual.as_ref()).unwrap());
        assert!(la.last().unwrap() < &la[0]);
        let out = a.render_rows(&p.semantic, p.visual.as_ref()).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let mut p = pairs(10, false);
        p.semantic = Tensor::zeros(&[9, 6]);
        assert!(matches!(train_decoder::<f64>(&p, &RendererConfig::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RendererConfig {
            epochs: 1,
            ..Default::default()
        };
        let p = pairs(12, true);
        let (dec, _) = train_decoder::<f32>(&p, &cfg).unwrap();
        save_renderer(dir.path(), &dec).unwrap();
        let back = load_renderer::<f32>(dir.path()).unwrap();
        assert_eq!(
            dec.render_rows(&p.semantic, p.visual.as_ref()).unwrap(),
            back.render_rows(&p.semantic, p.visual.as_ref()).unwrap()
        );
    }
}
