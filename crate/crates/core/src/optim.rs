//! Decoupled-weight-decay Adam with linear warm-up into cosine decay, plus
//! global-norm gradient clipping.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::{config_err, math};

/// Closed-form learning rate at `step` (0-based) out of `total_steps`:
/// linear ramp over the warm-up steps, then cosine decay to zero.
pub fn lr_at_step(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((total_steps as f64) * warmup_frac) as usize;
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let remaining = (total_steps - warmup).max(1);
    let progress = (step - warmup) as f64 / remaining as f64;
    base_lr * 0.5 * (1.0 + math::cos(math::PI * progress.min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(lr: f64, weight_decay: f64, warmup_frac: f64, total_steps: usize) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(config_err!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(config_err!("warmup fraction must be in [0,1), got {warmup_frac}"));
        }
        if weight_decay < 0.0 {
            return Err(config_err!("weight decay must be nonnegative"));
        }
        Ok(OptimizerConfig {
            lr,
            weight_decay,
            warmup_frac,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        })
    }
}

/// Per-parameter first/second moment state keyed by parameter id.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    step: usize,
    moments: BTreeMap<usize, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_at_step(
            self.step,
            self.config.total_steps,
            self.config.lr,
            self.config.warmup_frac,
        )
    }

    /// Applies one update to the trainable parameters present in `grads`.
    /// Gradients are clipped to the configured global norm first. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Vec<(ParamId, Tensor)>) -> Result<f64> {
        let lr = self.current_lr();
        if let Some(ceiling) = self.config.grad_clip {
            let total: f64 = grads
                .iter()
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = math::sqrt(total);
            if norm > ceiling {
                let scale = ceiling / norm;
                for (_, g) in grads.iter_mut() {
                    *g = g.scaled(scale);
                }
            }
        }
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let t = (self.step + 1) as f64;
        let bias1 = 1.0 - math::pow(b1, t);
        let bias2 = 1.0 - math::pow(b2, t);
        for (id, grad) in grads.iter() {
            let param = store.param(*id);
            if !param.trainable {
                return Err(config_err!(
                    "gradient supplied for frozen parameter '{}'",
                    param.name
                ));
            }
            let (m, v) = self
                .moments
                .entry(id.index())
                .or_insert_with(|| (Tensor::zeros(grad.rows(), grad.cols()), Tensor::zeros(grad.rows(), grad.cols())));
            let mut new_value = param.value.clone();
            for k in 0..grad.len() {
                let g = grad.data()[k];
                let mk = b1 * m.data()[k] + (1.0 - b1) * g;
                let vk = b2 * v.data()[k] + (1.0 - b2) * g * g;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let m_hat = mk / bias1;
                let v_hat = vk / bias2;
                let value = new_value.data()[k];
                new_value.data_mut()[k] = value
                    - lr * self.config.weight_decay * value
                    - lr * m_hat / (math::sqrt(v_hat) + self.config.eps);
            }
            store.set_value(*id, new_value)?;
        }
        self.step += 1;
        Ok(lr)
    }
}
