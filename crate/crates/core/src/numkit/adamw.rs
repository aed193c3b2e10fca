//! AdamW with decoupled weight decay, global-norm clipping and linear warmup.
//!
//! ```text
//! g      ← g · min(1, clip / ‖g‖₂)          (norm over all parameters)
//! lr_t   = lr · min(1, t / warmup)
//! w      ← w · (1 − lr_t · λ)
//! m      ← β₁ m + (1 − β₁) g
//! v      ← β₂ v + (1 − β₂) g²
//! w      ← w − lr_t · m̂ / (√v̂ + ε),   m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
//! ```
//!
//! Decay applies to every parameter buffer, layer-norm gains included.

use super::mlp::MlpWeights;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Global L2 clip threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f32>,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: None,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
    pub learning_rate: f32,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &MlpWeights) -> Self {
        let zeros: Vec<Vec<f32>> = params.params().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamWState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    /// Learning rate used for step number `t` (1-based).
    pub fn scheduled_lr(&self, t: u64) -> f32 {
        let c = &self.config;
        if c.warmup_steps == 0 || t >= c.warmup_steps {
            c.learning_rate
        } else {
            c.learning_rate * t as f32 / c.warmup_steps as f32
        }
    }

    /// Applies one update. A non-finite gradient leaves both `params` and the
    /// optimizer state untouched.
    pub fn update(&mut self, params: &mut MlpWeights, grads: &MlpWeights) -> Result<StepReport> {
        let gs = grads.params();
        let shapes_match = gs.len() == self.first.len()
            && gs.iter().zip(&self.first).all(|(g, m)| g.len() == m.len())
            && params.params().iter().zip(&gs).all(|(p, g)| p.len() == g.len());
        if !shapes_match {
            return Err(Error::shape(
                "adamw_step",
                "gradients matching parameter shapes",
                "mismatched buffers",
            ));
        }
        let mut sq = 0.0f64;
        for g in &gs {
            for &v in g.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("adamw_step gradient"));
                }
                sq += (v as f64) * (v as f64);
            }
        }
        let norm = sq.sqrt();
        let scale = match self.config.grad_clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step;
        let c = self.config;
        let lr = self.scheduled_lr(t);
        let bc1 = 1.0 - (c.beta1 as f64).powf(t as f64);
        let bc2 = 1.0 - (c.beta2 as f64).powf(t as f64);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        let decay = 1.0 - lr * c.weight_decay;

        for (((p, g), m), v) in params
            .params_mut()
            .into_iter()
            .zip(&gs)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if c.weight_decay != 0.0 {
                    p[i] *= decay;
                }
                p[i] -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(StepReport {
            grad_norm: norm,
            clipped: scale < 1.0,
            learning_rate: lr,
        })
    }
}

pub fn adamw_step(state: &mut AdamWState, params: &mut MlpWeights, grads: &MlpWeights) -> Result<StepReport> {
    state.update(params, grads)
}
