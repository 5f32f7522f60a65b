use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let all = [0..params.len()];
    adamw_step_ranges(params, grads, state, cfg, &all)
}

/// AdamW restricted to the coordinates in `ranges`; everything else,
/// including its moments, is left untouched.
pub fn adamw_step_ranges(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    ranges: &[Range<usize>],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len()
    {
        return Err(Error::Config(format!(
            "shape mismatch: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if cfg.lr < 0.0 {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    for r in ranges {
        if let Some(i) = grads[r.clone()].iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient {} is not finite; update aborted",
                r.start + i
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for r in ranges {
        for i in r.clone() {
            let g = grads[i];
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            params[i] -= cfg.lr * cfg.weight_decay * params[i];
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
