use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    bce_multilabel_on, l1_error_on, mixco_loss_on, mixco_mix_on, softclip_on, squared_error_on, sse_mse_on,
    ssv_total_on, MixPlan, MixTargets,
};
use crate::nncore::{Adam, AdamConfig, Bound, Real, Tape, Tensor, Var};
use crate::pipeline::config::{Mode, TrainConfig};
use crate::pipeline::data::{gather_rows, TrainingData};
use crate::pipeline::model::{Model, SubjectBatch};
use crate::rng;

/// Scalar value of every loss term for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub swm_bce: f64,
    pub contrastive: f64,
    pub sse_mse: f64,
    pub ssv_prior: f64,
    pub assist_l1: f64,
    pub assist_softclip: f64,
    pub ssv: f64,
}

impl LossBreakdown {
    /// Total recomputed from the components and the loss weights.
    pub fn recombine(&self, cfg: &TrainConfig) -> f64 {
        let w = &cfg.weights;
        let mut t = w.swm * self.swm_bce + w.softclip * self.contrastive + self.sse_mse;
        if cfg.mode == Mode::Full {
            t += self.ssv;
        }
        t
    }

    fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += other.total * scale;
        self.swm_bce += other.swm_bce * scale;
        self.contrastive += other.contrastive * scale;
        self.sse_mse += other.sse_mse * scale;
        self.ssv_prior += other.ssv_prior * scale;
        self.assist_l1 += other.assist_l1 * scale;
        self.assist_softclip += other.assist_softclip * scale;
        self.ssv += other.ssv * scale;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub mode: Mode,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn columns(mode: Mode) -> Vec<&'static str> {
        let mut c = vec!["epoch", "step", "total", "swm_bce", "contrastive", "sse_mse"];
        if mode == Mode::Full {
            c.extend(["ssv_prior", "assist_l1", "assist_softclip", "ssv"]);
        }
        c.push("lr");
        c
    }

    pub fn to_csv(&self) -> String {
        let mut out = History::columns(self.mode).join(",");
        out.push('\n');
        for e in &self.epochs {
            let l = &e.losses;
            let mut vals = vec![e.epoch.to_string(), e.step.to_string()];
            let mut num = vec![l.total, l.swm_bce, l.contrastive, l.sse_mse];
            if self.mode == Mode::Full {
                num.extend([l.ssv_prior, l.assist_l1, l.assist_softclip, l.ssv]);
            }
            num.push(e.lr);
            vals.extend(num.iter().map(|v| format!("{v:.9e}")));
            out.push_str(&vals.join(","));
            out.push('\n');
        }
        out
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.losses.total).collect()
    }
}

/// One assembled mini-batch: subject groups with targets in the same row order.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub groups: Vec<SubjectBatch<T>>,
    pub labels: Tensor<T>,
    pub targets: Tensor<T>,
    pub pooled: Tensor<T>,
    pub deep_a: Tensor<T>,
    pub deep_b: Tensor<T>,
}

impl<T: Real> Batch<T> {
    /// `samples` are `(subject, stimulus row)` pairs; rows are regrouped by subject.
    pub fn assemble(data: &TrainingData, samples: &[(usize, usize)]) -> Result<Self> {
        let mut sorted = samples.to_vec();
        sorted.sort_by_key(|&(k, _)| k);
        let mut groups = Vec::new();
        let mut order = Vec::with_capacity(sorted.len());
        let mut start = 0;
        while start < sorted.len() {
            let k = sorted[start].0;
            let end = start + sorted[start..].iter().take_while(|s| s.0 == k).count();
            let rows: Vec<usize> = sorted[start..end].iter().map(|s| s.1).collect();
            let vox = data.voxels.get(k).ok_or_else(|| Error::Lookup {
                kind: "subject",
                key: k.to_string(),
            })?;
            groups.push(SubjectBatch {
                subject: k,
                voxels: gather_rows(vox, &rows).cast(),
            });
            order.extend(rows);
            start = end;
        }
        let t = &data.table;
        Ok(Self {
            groups,
            labels: gather_rows(&t.labels, &order).cast(),
            targets: gather_rows(&t.targets, &order).cast(),
            pooled: gather_rows(&t.pooled, &order).cast(),
            deep_a: gather_rows(&t.deep_a, &order).cast(),
            deep_b: gather_rows(&t.deep_b, &order).cast(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape variables of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub swm_bce: Var,
    pub contrastive: Var,
    pub sse_mse: Var,
    pub ssv: Option<SsvLossVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct SsvLossVars {
    pub prior: Var,
    pub assist_l1: Var,
    pub assist_softclip: Var,
    pub total: Var,
}

/// Build the full objective for one batch on `tape`.
pub fn objective<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &Batch<T>,
    mix: Option<&MixPlan<T>>,
) -> Result<LossVars> {
    let w = &cfg.weights;
    let tau = cfg.temperature;
    let fwd = model.forward(tape, bound, &batch.groups)?;
    let swm_bce = bce_multilabel_on(tape, fwd.probs, &batch.labels)?;
    let contrastive = match mix {
        Some(plan) => {
            let mixed = mixco_mix_on(tape, fwd.latent, plan)?;
            let enc = model.sse_encode(tape, bound, mixed)?;
            mixco_loss_on(tape, enc, &batch.targets, plan, tau, MixTargets::Teacher)?
        }
        None => softclip_on(tape, fwd.encoded, &batch.targets, tau)?,
    };
    let sse_mse = sse_mse_on(tape, &batch.targets, fwd.encoded, fwd.denoised, w.denoising)?;
    let a = tape.scale(swm_bce, T::lit(w.swm));
    let b = tape.scale(contrastive, T::lit(w.softclip));
    let ab = tape.add(a, b)?;
    let mut total = tape.add(ab, sse_mse)?;
    let ssv = match fwd.visual {
        Some(v) => {
            let prior = squared_error_on(tape, v.refined, &batch.deep_b)?;
            let assist_l1 = l1_error_on(tape, v.assist_pixels, &batch.pooled)?;
            let assist_softclip = softclip_on(tape, v.assist_features, &batch.deep_a, tau)?;
            let assist = tape.add(assist_l1, assist_softclip)?;
            let s = ssv_total_on(tape, prior, assist, w)?;
            total = tape.add(total, s)?;
            Some(SsvLossVars {
                prior,
                assist_l1,
                assist_softclip,
                total: s,
            })
        }
        None => None,
    };
    Ok(LossVars {
        total,
        swm_bce,
        contrastive,
        sse_mse,
        ssv,
    })
}

fn breakdown<T: Real>(tape: &Tape<T>, v: &LossVars) -> LossBreakdown {
    let s = |x: Var| tape.scalar(x).f64();
    let mut out = LossBreakdown {
        total: s(v.total),
        swm_bce: s(v.swm_bce),
        contrastive: s(v.contrastive),
        sse_mse: s(v.sse_mse),
        ..Default::default()
    };
    if let Some(ssv) = v.ssv {
        out.ssv_prior = s(ssv.prior);
        out.assist_l1 = s(ssv.assist_l1);
        out.assist_softclip = s(ssv.assist_softclip);
        out.ssv = s(ssv.total);
    }
    out
}

/// Loss terms of `model` on `batch` without updating anything.
pub fn evaluate_batch<T: Real>(model: &Model<T>, cfg: &TrainConfig, batch: &Batch<T>) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_| false);
    let vars = objective(model, cfg, &mut tape, &bound, batch, None)?;
    Ok(breakdown(&tape, &vars))
}

/// Shuffled `(subject, row)` samples for one epoch.
pub fn epoch_order(data: &TrainingData, seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut samples = data.samples();
    samples.shuffle(&mut rng::stream(seed, "epoch", &[epoch as u64]));
    samples
}

pub fn batches_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    // A trailing batch of one row cannot form a contrastive pair; it is dropped.
    let full = n_samples / batch_size;
    if n_samples % batch_size >= 2 {
        full + 1
    } else {
        full.max(1)
    }
}

/// Joint end-to-end training. `observer` sees every finished epoch.
pub fn train<T: Real>(
    data: &TrainingData,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(Model<T>, History)> {
    cfg.validate()?;
    let mut model = Model::<T>::new(&data.shape, &cfg.model, cfg.mode, cfg.seed)?;
    let history = fit(&mut model, data, cfg, &mut observer)?;
    Ok((model, history))
}

/// Train an existing model in place.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    data: &TrainingData,
    cfg: &TrainConfig,
    observer: &mut impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if model.mode != cfg.mode {
        return Err(Error::Mode(format!(
            "model was built for {:?} but the config asks for {:?}",
            model.mode, cfg.mode
        )));
    }
    let n = data.samples().len();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let mut adam = Adam::new(
        AdamConfig {
            base_lr: cfg.base_lr,
            min_lr: cfg.min_lr,
            total_steps: cfg.epochs * per_epoch,
            ..Default::default()
        },
        &model.params,
    );
    let mut history = History {
        mode: cfg.mode,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data, cfg.seed, epoch);
        let mut mean = LossBreakdown::default();
        let mut lr = adam.current_lr();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate().take(per_epoch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = Batch::<T>::assemble(data, chunk)?;
            let plan = cfg
                .mixco
                .then(|| MixPlan::sample(batch.len(), &mut rng::stream(cfg.seed, "mixco", &[epoch as u64, b as u64])));
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, |name| cfg.trainable(name));
            let vars = objective(model, cfg, &mut tape, &bound, &batch, plan.as_ref())?;
            let losses = breakdown(&tape, &vars);
            if !losses.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step: adam.steps_taken(),
                    reason: format!("non-finite loss {}", losses.total),
                });
            }
            let grads = tape.backward(vars.total)?;
            lr = adam.current_lr();
            adam.step_from(&mut model.params, bound.vars(), &grads)
                .map_err(|e| Error::Training {
                    epoch,
                    step: adam.steps_taken(),
                    reason: e.to_string(),
                })?;
            mean.accumulate(&losses, 1.0 / per_epoch as f64);
        }
        let record = EpochRecord {
            epoch,
            step: adam.steps_taken(),
            losses: mean,
            lr,
        };
        observer(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
