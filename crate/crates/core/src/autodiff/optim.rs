//! AdamW with linear warmup followed by half-cycle cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 0,
            total_steps: 1,
        }
    }
}

/// Learning rate used for update number `step` (1-based).
///
/// Linear ramp to `lr` over `warmup_steps`, then `lr * (1 + cos(pi * t)) / 2`
/// with `t` running from 0 to 1 over the remaining steps; `step == total_steps`
/// gives exactly 0.
pub fn learning_rate(cfg: &AdamWConfig, step: u64) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    /// Moment buffers shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(&self.config, self.step)
    }

    /// One AdamW update. `decay[i]` selects which parameters receive
    /// decoupled weight decay; `None` gradients leave a parameter untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], decay: &[bool]) -> Result<f64> {
        if params.len() != self.first.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: vec![params.len(), grads.len(), decay.len()],
                rhs: vec![self.first.len()],
            });
        }
        self.step += 1;
        let c = &self.config;
        let lr = learning_rate(c, self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((x, &gx), mx), vx) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mx = c.beta1 * *mx + (1.0 - c.beta1) * gx;
                *vx = c.beta2 * *vx + (1.0 - c.beta2) * gx * gx;
                let mhat = *mx / bc1;
                let vhat = *vx / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *x);
            }
        }
        Ok(lr)
    }
}
