use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use super::{DiffError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), DiffError> {
    if grads.blocks.len() != params.len() || state.m.len() != params.len() {
        return Err(DiffError::Shape {
            op: "adam_step",
            detail: "parameter, gradient and state block counts differ".into(),
        });
    }
    if !grads.all_finite() {
        return Err(DiffError::NonFinite { op: "adam_step" });
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let g = &grads.blocks[k];
        if g.dim() != p.value.dim() || state.m[k].dim() != p.value.dim() {
            return Err(DiffError::Shape {
                op: "adam_step",
                detail: format!("block `{}` shape mismatch", p.name),
            });
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        ndarray::Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|w, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    if !params.all_finite() {
        return Err(DiffError::NonFinite { op: "adam_step" });
    }
    Ok(())
}
