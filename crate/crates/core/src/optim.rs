//! Decoupled-weight-decay Adam with linear warmup, cosine decay and
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub clip_norm: f64,
}

impl OptimConfig {
    /// Pretraining recipe.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_epochs: 5,
            clip_norm: 1.0,
        }
    }

    /// Fine-tuning recipe.
    pub fn finetune() -> Self {
        Self {
            lr: 2e-3,
            min_lr: 1e-6,
            beta2: 0.999,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-step learning rate: linear warmup to `lr`, then cosine to `min_lr`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &OptimConfig, steps_per_epoch: usize, epochs: usize) -> Self {
        let total_steps = steps_per_epoch * epochs;
        // leave at least one decay step
        let warmup_steps = (cfg.warmup_epochs * steps_per_epoch).min(total_steps.saturating_sub(1));
        Self {
            lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate for 0-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub struct AdamW<T: Scalar> {
    cfg: OptimConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, ps: &ParamStore<T>) -> Self {
        let zeros = || ps.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update to the parameters for which `trainable` holds.
    /// Gradients are clipped to `clip_norm` jointly over those parameters;
    /// weight decay applies to matrices only (rank ≥ 2). Returns the
    /// pre-clip gradient norm.
    pub fn step(
        &mut self,
        ps: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        if grads.len() != ps.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                ps.len()
            )));
        }
        let active: Vec<bool> = ps.iter().map(|(name, _)| trainable(name)).collect();
        let sq: f64 = grads
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .flat_map(|(g, _)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let clip = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / (norm + 1e-6)
        } else {
            1.0
        };

        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t));
        let (lr_t, eps, clip) = (T::lit(lr), T::lit(c.eps), T::lit(clip));
        let ids: Vec<_> = ps.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !active[i] {
                continue;
            }
            let p = ps.get(id);
            let decay = if p.rank() >= 2 { T::lit(lr * c.weight_decay) } else { T::zero() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for (j, (w, &g)) in data.iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w = *w - decay * *w - lr_t * update;
            }
            let shape = p.shape().to_vec();
            ps.set(id, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(norm)
    }
}
