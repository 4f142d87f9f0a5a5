//! Adam with a linear warmup ramp.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr_max: 3e-3, warmup_steps: 100, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// lr(step) = lr_max * min(1, step / warmup); the first update is step 1.
pub fn lr_at(cfg: &AdamConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.lr_max
    } else {
        cfg.lr_max * (step.min(cfg.warmup_steps) as f64 / cfg.warmup_steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    /// Updates applied so far.
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![F::zero(); n], v: vec![F::zero(); n], t: 0 }
    }
}

/// One bias-corrected Adam step at learning rate `lr_at(step)`.
pub fn adam_update<F: Scalar>(theta: &mut [F], grad: &[F], state: &mut AdamState<F>, step: u64, cfg: &AdamConfig) -> Result<f64, TrainError> {
    assert_eq!(theta.len(), grad.len());
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let norm = grad.iter().filter(|g| g.is_finite()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
        return Err(TrainError::Numerics(format!(
            "non-finite gradient at index {i} ({}), finite-part norm {norm:.4e}, step {step}",
            grad[i]
        )));
    }
    let lr = lr_at(cfg, step);
    state.t += 1;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let (lr, eps) = (F::lit(lr), F::lit(cfg.eps));
    let (c1, c2) = (F::lit(c1), F::lit(c2));
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(lr.as_f64())
}
