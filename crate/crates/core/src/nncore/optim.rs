use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Gradients, ParamId, ParamSet, Real, Tensor, Var};

/// Single-cycle cosine annealing from `base_lr` at step 0 to `min_lr` at
/// `total_steps`. Steps outside `[0, total_steps]` are clamped.
pub fn cosine_lr(step: usize, base_lr: f64, min_lr: f64, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64;
    let phase = std::f64::consts::PI * s / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: 1e-3,
            min_lr: 0.0,
            total_steps: 1,
        }
    }
}

/// Adam moments for every parameter of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.config.base_lr, self.config.min_lr, self.config.total_steps)
    }

    /// One bias-corrected Adam update. `grads[i]` is the gradient of parameter
    /// `i`, or `None` for parameters that did not take part (left untouched).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::dim("adam_step", params.get(id).shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(c.eps));
        let ids: Vec<ParamId> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[i] else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Convenience wrapper collecting gradients for bound variables.
    pub fn step_from(&mut self, params: &mut ParamSet<T>, vars: &[Var], grads: &Gradients<T>) -> Result<()> {
        let collected: Vec<Option<&Tensor<T>>> = vars.iter().map(|&v| grads.get(v)).collect();
        self.step(params, &collected)
    }
}
