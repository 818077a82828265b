//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Float, ParamId, ParamStore, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Floor reached at the end of the cosine schedule.
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup steps before the cosine decay starts.
    pub warmup_steps: u64,
    /// Length of the schedule; steps past it stay at `min_lr`.
    pub total_steps: u64,
    /// Global gradient-norm clip, disabled when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 1000,
            grad_clip: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Outcome of one accepted update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let m: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = m.clone();
        Self { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<F> {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<F> {
        &self.v[id.0]
    }

    /// Apply one update. Parameters absent from `grads` are left untouched.
    /// A non-finite gradient rejects the whole step without mutating anything.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) -> Result<StepReport> {
        let mut sq = 0.0f64;
        for (id, g) in grads {
            let p = store.get(*id);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    store.name(*id),
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
            sq += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let clip = match self.config.grad_clip {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (fb1, fb2) = (F::lit(b1), F::lit(b2));
        let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let fclip = F::lit(clip);
        let step_size = F::lit(lr / bc1);
        let inv_bc2_sqrt = F::lit(1.0 / bc2.sqrt());
        let eps = F::lit(self.config.eps);
        for (id, g) in grads {
            let decay = if store.decays(*id) { self.config.weight_decay } else { 0.0 };
            let shrink = F::lit(1.0 - lr * decay);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * fclip;
                m[i] = fb1 * m[i] + one_b1 * gi;
                v[i] = fb2 * v[i] + one_b2 * gi * gi;
                p[i] *= shrink;
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(StepReport { lr, grad_norm })
    }
}
