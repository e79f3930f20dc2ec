//! Training objectives.
//!
//! Each loss exists as a tape operation composition (`*_on` functions, used
//! for training and gradient checks) and as a value-level wrapper that runs
//! the same composition on a private tape.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{softmax_rows, Real, Tape, Tensor, Var};
use crate::rng::Stream;

/// Probability clamp applied before the logarithms of the multi-label BCE.
pub const PROB_EPS: f64 = 1e-7;

/// Default softmax temperature of the contrastive terms.
pub const DEFAULT_TEMPERATURE: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub softclip: f64,
    pub swm: f64,
    pub denoising: f64,
    pub prior: f64,
    pub assist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            softclip: 0.1,
            swm: 0.05,
            denoising: 0.5,
            prior: 1.0,
            assist: 0.33,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("softclip", self.softclip),
            ("swm", self.swm),
            ("denoising", self.denoising),
            ("prior", self.prior),
            ("assist", self.assist),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), format!("must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter {
            name: "temperature",
            reason: format!("must be > 0, got {tau}"),
        })
    }
}

// ----- multi-label BCE ----------------------------------------------------------

/// Mean over samples of `-sum_c [y log p + (1 - y) log(1 - p)]`.
pub fn bce_multilabel_on<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &Tensor<T>) -> Result<Var> {
    tape.bce(probs, labels, T::lit(PROB_EPS))
}

pub fn bce_multilabel<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(as_matrix(probs));
    let loss = bce_multilabel_on(&mut tape, p, &as_matrix(labels))?;
    Ok(tape.scalar(loss))
}

fn as_matrix<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    if t.shape().len() == 1 {
        t.clone().reshape(&[1, t.len()]).expect("same length")
    } else {
        t.clone()
    }
}

// ----- SoftCLIP -----------------------------------------------------------------

/// Soft targets `p[b, j] = softmax_j(t_b . t_j / tau)`.
pub fn softclip_teacher<T: Real>(targets: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let mut sims = Tensor::new(vec![targets.rows(), targets.rows()], vec![T::zero(); targets.rows().pow(2)])?;
    let inv = T::lit(1.0 / tau);
    for i in 0..targets.rows() {
        for j in 0..targets.rows() {
            let d: T = targets.row(i).iter().zip(targets.row(j)).map(|(&a, &b)| a * b).sum();
            sims.data_mut()[i * targets.rows() + j] = d * inv;
        }
    }
    Ok(softmax_rows(&sims))
}

/// Logits `pred . t_j / tau` for every prediction row against every target.
fn similarity_logits<T: Real>(tape: &mut Tape<T>, preds: Var, targets: &Tensor<T>, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let pv = tape.value(preds);
    if pv.cols() != targets.cols() || pv.rows() != targets.rows() {
        return Err(Error::dim("contrastive", pv.shape(), targets.shape()));
    }
    let t = tape.constant(targets.clone());
    let logits = tape.matmul_bt(preds, t)?;
    Ok(tape.scale(logits, T::lit(1.0 / tau)))
}

/// SoftCLIP distillation: cross-entropy between the target-target soft labels
/// and the prediction-target softmax, averaged over anchors.
pub fn softclip_on<T: Real>(tape: &mut Tape<T>, preds: Var, targets: &Tensor<T>, tau: f64) -> Result<Var> {
    let logits = similarity_logits(tape, preds, targets, tau)?;
    let teacher = softclip_teacher(targets, tau)?;
    tape.soft_cross_entropy(logits, &teacher)
}

/// One-hot (InfoNCE) contrastive loss of predictions against their own targets.
pub fn hard_contrastive_on<T: Real>(tape: &mut Tape<T>, preds: Var, targets: &Tensor<T>, tau: f64) -> Result<Var> {
    let logits = similarity_logits(tape, preds, targets, tau)?;
    let b = targets.rows();
    let eye = Tensor::from_fn(&[b, b], |i| if i / b == i % b { T::one() } else { T::zero() });
    tape.soft_cross_entropy(logits, &eye)
}

/// B x E predictions against B x E targets at temperature `tau`.
#[derive(Debug, Clone)]
pub struct SoftClipBatch<T> {
    pub predictions: Tensor<T>,
    pub targets: Tensor<T>,
    pub temperature: f64,
}

impl<T: Real> SoftClipBatch<T> {
    pub fn new(predictions: Tensor<T>, targets: Tensor<T>, temperature: f64) -> Result<Self> {
        check_tau(temperature)?;
        if predictions.shape() != targets.shape() || predictions.rows() == 0 {
            return Err(Error::dim("softclip", predictions.shape(), targets.shape()));
        }
        Ok(Self {
            predictions,
            targets,
            temperature,
        })
    }

    pub fn loss(&self) -> Result<T> {
        let mut tape = Tape::new();
        let p = tape.constant(self.predictions.clone());
        let l = softclip_on(&mut tape, p, &self.targets, self.temperature)?;
        Ok(tape.scalar(l))
    }

    pub fn hard_loss(&self) -> Result<T> {
        let mut tape = Tape::new();
        let p = tape.constant(self.predictions.clone());
        let l = hard_contrastive_on(&mut tape, p, &self.targets, self.temperature)?;
        Ok(tape.scalar(l))
    }
}

// ----- MixCo --------------------------------------------------------------------

/// Per-row mixing partners and coefficients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan<T> {
    pub partner: Vec<usize>,
    pub alpha: Vec<T>,
}

impl<T: Real> MixPlan<T> {
    pub fn new(partner: Vec<usize>, alpha: Vec<T>) -> Result<Self> {
        if partner.len() != alpha.len() {
            return Err(Error::dim("mix_plan", &[partner.len()], &[alpha.len()]));
        }
        for &a in &alpha {
            check_alpha(a.f64())?;
        }
        if let Some(i) = partner.iter().enumerate().position(|(i, &p)| p == i || p >= partner.len()) {
            if partner.len() > 1 {
                return Err(Error::Parameter {
                    name: "partner",
                    reason: format!("row {i} must pair with a different row of the batch"),
                });
            }
        }
        Ok(Self { partner, alpha })
    }

    /// Every row keeps itself entirely (`alpha = 1`).
    pub fn identity(batch: usize) -> Self {
        Self {
            partner: (0..batch).map(|i| (i + 1) % batch.max(1)).collect(),
            alpha: vec![T::one(); batch],
        }
    }

    /// Derangement by cyclic shift of a random order; `alpha ~ Beta(1, 1)`.
    pub fn sample(batch: usize, rng: &mut Stream) -> Self {
        let mut order: Vec<usize> = (0..batch).collect();
        order.shuffle(rng);
        let mut partner = vec![0; batch];
        for (pos, &row) in order.iter().enumerate() {
            partner[row] = order[(pos + 1) % batch];
        }
        let beta = Beta::new(1.0, 1.0).expect("valid beta parameters");
        let alpha = (0..batch).map(|_| T::lit(beta.sample(rng))).collect();
        Self { partner, alpha }
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    /// Soft labels: mass `alpha` on the row itself and `1 - alpha` on its
    /// partner, or the same mixture of teacher rows when a teacher is given.
    pub fn labels(&self, teacher: Option<&Tensor<T>>) -> Tensor<T> {
        let b = self.len();
        let mut out = Tensor::zeros(&[b, b]);
        for (row, (&p, &a)) in self.partner.iter().zip(&self.alpha).enumerate() {
            let dst = out.row_mut(row);
            match teacher {
                None => {
                    dst[row] = dst[row] + a;
                    dst[p] = dst[p] + (T::one() - a);
                }
                Some(t) => {
                    for ((d, &own), &other) in dst.iter_mut().zip(t.row(row)).zip(t.row(p)) {
                        *d = a * own + (T::one() - a) * other;
                    }
                }
            }
        }
        out
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Parameter {
            name: "alpha",
            reason: format!("mixing coefficient must lie in [0, 1], got {alpha}"),
        })
    }
}

/// `alpha * x_i + (1 - alpha) * x_j`.
pub fn mixco_mix<T: Real>(x_i: &[T], x_j: &[T], alpha: T) -> Result<Vec<T>> {
    check_alpha(alpha.f64())?;
    if x_i.len() != x_j.len() {
        return Err(Error::dim("mixco_mix", &[x_i.len()], &[x_j.len()]));
    }
    Ok(x_i
        .iter()
        .zip(x_j)
        .map(|(&a, &b)| alpha * a + (T::one() - alpha) * b)
        .collect())
}

pub fn mixco_mix_on<T: Real>(tape: &mut Tape<T>, x: Var, plan: &MixPlan<T>) -> Result<Var> {
    tape.mix_rows(x, &plan.partner, &plan.alpha)
}

/// Which soft labels the mixed contrastive loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixTargets {
    /// `alpha` on the own column, `1 - alpha` on the partner column.
    Hard,
    /// The same mixture applied to the SoftCLIP teacher rows.
    Teacher,
}

/// Contrastive loss of encoded mixed inputs against the unmixed targets.
pub fn mixco_loss_on<T: Real>(
    tape: &mut Tape<T>,
    encoded_mixed: Var,
    targets: &Tensor<T>,
    plan: &MixPlan<T>,
    tau: f64,
    kind: MixTargets,
) -> Result<Var> {
    if plan.len() != targets.rows() {
        return Err(Error::dim("mixco_loss", &[plan.len()], targets.shape()));
    }
    let logits = similarity_logits(tape, encoded_mixed, targets, tau)?;
    let labels = match kind {
        MixTargets::Hard => plan.labels(None),
        MixTargets::Teacher => plan.labels(Some(&softclip_teacher(targets, tau)?)),
    };
    tape.soft_cross_entropy(logits, &labels)
}

/// Value-level MixCo loss with an identity encoder.
pub fn mixco_loss<T: Real>(inputs: &Tensor<T>, targets: &Tensor<T>, plan: &MixPlan<T>, tau: f64) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let mixed = mixco_mix_on(&mut tape, x, plan)?;
    let l = mixco_loss_on(&mut tape, mixed, targets, plan, tau, MixTargets::Hard)?;
    Ok(tape.scalar(l))
}

// ----- regression terms ---------------------------------------------------------

/// `sum((pred - target)^2) / batch`.
pub fn squared_error_on<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let s = tape.sum_squares(d);
    Ok(tape.scale(s, T::lit(1.0 / target.rows().max(1) as f64)))
}

/// `sum(|pred - target|) / batch`.
pub fn l1_error_on<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, T::lit(1.0 / target.rows().max(1) as f64)))
}

/// `||t - encoded||^2 + lambda * ||t - denoised||^2`, summed over elements and
/// averaged over the batch.
pub fn sse_mse_on<T: Real>(
    tape: &mut Tape<T>,
    targets: &Tensor<T>,
    encoded: Var,
    denoised: Var,
    lambda_denoising: f64,
) -> Result<Var> {
    for v in [encoded, denoised] {
        if tape.value(v).shape() != targets.shape() {
            return Err(Error::dim("sse_mse", targets.shape(), tape.value(v).shape()));
        }
    }
    let enc = squared_error_on(tape, encoded, targets)?;
    let den = squared_error_on(tape, denoised, targets)?;
    let den = tape.scale(den, T::lit(lambda_denoising));
    tape.add(enc, den)
}

pub fn sse_mse<T: Real>(targets: &Tensor<T>, encoded: &Tensor<T>, denoised: &Tensor<T>, lambda_denoising: f64) -> Result<T> {
    let (t, e, d) = (as_matrix(targets), as_matrix(encoded), as_matrix(denoised));
    let mut tape = Tape::new();
    let ev = tape.constant(e);
    let dv = tape.constant(d);
    let l = sse_mse_on(&mut tape, &t, ev, dv, lambda_denoising)?;
    Ok(tape.scalar(l))
}

/// `lambda_prior * prior + lambda_assist * assist`.
pub fn ssv_total(prior: f64, assist: f64, weights: &LossWeights) -> f64 {
    weights.prior * prior + weights.assist * assist
}

pub fn ssv_total_on<T: Real>(tape: &mut Tape<T>, prior: Var, assist: Var, weights: &LossWeights) -> Result<Var> {
    let p = tape.scale(prior, T::lit(weights.prior));
    let a = tape.scale(assist, T::lit(weights.assist));
    tape.add(p, a)
}
