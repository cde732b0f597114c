//! Decoupled AdamW with a linear-warmup cosine learning-rate schedule.
//!
//! The state keeps the bias-corrected moments `m̂` and `v̂` and updates them
//! as running averages,
//!
//! ```text
//! m̂ ← m̂ + (g  − m̂) · (1 − β₁) / (1 − β₁ᵗ)
//! v̂ ← v̂ + (g² − v̂) · (1 − β₂) / (1 − β₂ᵗ)
//! p ← p · (1 − lr·wd) − lr · m̂ / (√v̂ + ε)
//! ```
//!
//! which is algebraically the usual `m / (1 − β₁ᵗ)` form; the raw moment is
//! `m = m̂ · (1 − β₁ᵗ)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite gradient in {tensor} at element {index}")]
    NonFinite { tensor: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Parameters whose name contains any of these substrings skip decay.
    pub no_decay: Vec<String>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1.6e-4,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay: 1.6e-5,
            no_decay: Vec::new(),
            clip_norm: None,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |msg: String| Err(OptimizerError::Config(msg));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return bad(format!("peak learning rate {} must be positive", self.peak_lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        Ok(())
    }

    fn decays(&self, name: &str) -> bool {
        !self.no_decay.iter().any(|pat| name.contains(pat.as_str()))
    }
}

/// Linear warmup from zero, then cosine decay to `floor_lr` at `total_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub floor_lr: f64,
}

impl Schedule {
    pub const DEFAULT_WARMUP: u64 = 100;

    pub fn new(total_steps: u64) -> Self {
        Self {
            warmup_steps: Self::DEFAULT_WARMUP,
            total_steps,
            floor_lr: 0.0,
        }
    }

    pub fn validate(&self, config: &AdamWConfig) -> Result<(), OptimizerError> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(OptimizerError::Config(format!(
                "warmup {} must satisfy 0 < warmup < total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.floor_lr >= 0.0 && self.floor_lr < config.peak_lr) {
            return Err(OptimizerError::Config(format!(
                "floor {} must lie in [0, peak {})",
                self.floor_lr, config.peak_lr
            )));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, schedule: &Schedule, config: &AdamWConfig) -> Result<f64, OptimizerError> {
    schedule.validate(config)?;
    let (w, s) = (schedule.warmup_steps, schedule.total_steps);
    if step > s {
        return Err(OptimizerError::Contract(format!(
            "step {step} is past the end of a {s}-step schedule"
        )));
    }
    if step <= w {
        return Ok(config.peak_lr * step as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (s - w) as f64;
    let floor = schedule.floor_lr;
    Ok(floor + 0.5 * (config.peak_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Per-tensor moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<F> {
    pub step: u64,
    pub m_hat: Vec<Tensor<F>>,
    pub v_hat: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamWState<F> {
    /// Zero moments shaped like `params`.
    pub fn new<'a, I: IntoIterator<Item = &'a Tensor<F>>>(params: I) -> Self {
        let (m_hat, v_hat) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            step: 0,
            m_hat,
            v_hat,
        }
    }

    /// Raw (uncorrected) moments `(m, v)` for tensor `i`.
    pub fn raw_moments(&self, i: usize, config: &AdamWConfig) -> (Vec<f64>, Vec<f64>) {
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        (
            self.m_hat[i].data().iter().map(|x| x.as_f64() * c1).collect(),
            self.v_hat[i].data().iter().map(|x| x.as_f64() * c2).collect(),
        )
    }
}

/// Diagnostics from one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One AdamW update. `names` selects decay exclusion; all slices align.
/// A non-finite gradient leaves parameters and state untouched.
pub fn adamw_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    names: &[String],
    grads: &[Tensor<F>],
    state: &mut AdamWState<F>,
    config: &AdamWConfig,
    lr: f64,
) -> Result<StepStats, OptimizerError> {
    config.validate()?;
    let n = params.len();
    if names.len() != n || grads.len() != n || state.m_hat.len() != n || state.v_hat.len() != n {
        return Err(OptimizerError::Contract(format!(
            "{n} params, {} names, {} grads, {} moment tensors",
            names.len(),
            grads.len(),
            state.m_hat.len()
        )));
    }
    for i in 0..n {
        let shape = params[i].shape();
        if grads[i].shape() != shape
            || state.m_hat[i].shape() != shape
            || state.v_hat[i].shape() != shape
        {
            return Err(OptimizerError::Contract(format!(
                "shape mismatch for {}: param {:?}, grad {:?}",
                names[i],
                shape,
                grads[i].shape()
            )));
        }
        if let Some(index) = grads[i].data().iter().position(|g| !g.is_finite()) {
            return Err(OptimizerError::NonFinite {
                tensor: names[i].clone(),
                index,
            });
        }
    }

    let grad_norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    let clip_scale = match config.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let k1 = (1.0 - config.beta1) / (1.0 - config.beta1.powi(t));
    let k2 = (1.0 - config.beta2) / (1.0 - config.beta2.powi(t));
    for i in 0..n {
        let decay = if config.decays(&names[i]) {
            1.0 - lr * config.weight_decay
        } else {
            1.0
        };
        let p = params[i].data_mut();
        let m = state.m_hat[i].data_mut();
        let v = state.v_hat[i].data_mut();
        for (j, g) in grads[i].data().iter().enumerate() {
            let g = g.as_f64() * clip_scale;
            let mh = m[j].as_f64();
            let vh = v[j].as_f64();
            let mh = mh + (g - mh) * k1;
            let vh = vh + (g * g - vh) * k2;
            m[j] = F::cast_from(mh);
            v[j] = F::cast_from(vh);
            let update = mh / (vh.sqrt() + config.epsilon);
            p[j] = F::cast_from(p[j].as_f64() * decay - lr * update);
        }
    }
    Ok(StepStats {
        grad_norm,
        clip_scale,
    })
}
