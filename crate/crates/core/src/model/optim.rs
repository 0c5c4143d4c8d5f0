//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero at `total_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Linear warmup length, for either schedule.
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3.0e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            total_steps: 0,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr >= 0.0 && self.lr.is_finite(),
            Error::Config("lr must be finite and nonnegative".into())
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Error::Config("betas must lie in [0, 1)".into())
        );
        ensure!(
            self.eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0,
            Error::Config("eps must be positive; decay and clip nonnegative".into())
        );
        ensure!(
            self.schedule == Schedule::Constant || self.total_steps > 0,
            Error::Config("cosine schedule needs total_steps".into())
        );
        Ok(())
    }

    /// Learning rate for the update that produces step `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One update at 1-based step `t`. Tensors named in `frozen` are left
/// untouched; weight decay applies to matrices only.
pub fn adamw_update(
    cfg: &OptimizerConfig,
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    frozen: &[&str],
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        if frozen.contains(&p.name.as_str()) || lr == 0.0 {
            continue;
        }
        let decay = if p.shape.len() == 2 { cfg.weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * p.data[i]);
        }
    }
}
