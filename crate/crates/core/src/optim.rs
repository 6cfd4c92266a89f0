//! AdamW with decoupled weight decay and a warmup + half-cosine schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {param} at element {index}; step rejected")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("parameter {param}: shape {param_shape:?} does not match gradient/state shape {other:?}")]
    ShapeMismatch {
        param: usize,
        param_shape: Vec<usize>,
        other: Vec<usize>,
    },
    #[error("{0} parameters but {1} gradients")]
    CountMismatch(usize, usize),
    #[error("learning rate must be >= 0, got {0}")]
    NegativeLr(f32),
    #[error("schedule needs total_steps > 0")]
    EmptySchedule,
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moments for a list of parameters plus the shared step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { m, v, t: 0 }
    }
}

/// One AdamW update. `decay[i]` selects whether weight decay applies to
/// parameter `i`. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&[f32]],
    decay: &[bool],
    state: &mut AdamWState,
    lr: f32,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    if lr < 0.0 || lr.is_nan() {
        return Err(OptimError::NegativeLr(lr));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::CountMismatch(params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(OptimError::ShapeMismatch {
                param: i,
                param_shape: p.shape().to_vec(),
                other: vec![g.len()],
            });
        }
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient { param: i, index });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let wd = if decay.get(i).copied().unwrap_or(true) {
            cfg.weight_decay
        } else {
            0.0
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            *theta -= lr * wd * *theta;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            *theta -= (lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay to
/// zero at `total_steps`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    base_lr: f32,
    warmup_steps: usize,
) -> Result<f32, OptimError> {
    if total_steps == 0 {
        return Err(OptimError::EmptySchedule);
    }
    if step > total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f32 / warmup_steps as f32);
    }
    let decay = total_steps.saturating_sub(warmup_steps);
    if decay == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / decay as f64;
    Ok((base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32)
}
