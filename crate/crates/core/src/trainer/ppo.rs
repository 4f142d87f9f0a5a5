//! Token-level PPO baseline: linear value head, GAE over the flattened
//! token sequence, clipped per-token surrogate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::gae;
use super::batch::GroupBatch;
use super::grpo::{clipped_surrogate, Diagnostics};
use super::TrainError;
use crate::policy::{FeatureConfig, MaskOptions, PolicyParams, Prepared};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip_eps: 0.2, gamma: 1.0, lambda: 1.0, value_coef: 0.5 }
    }
}

/// Max tokens per timestep the value head distinguishes.
const POSITIONS: usize = 2;

/// V(x, position) = w . x + u[position] + b
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueHead<F> {
    pub theta: Vec<F>,
}

impl<F: Scalar> ValueHead<F> {
    pub fn zeros(features: &FeatureConfig) -> Self {
        ValueHead { theta: vec![F::zero(); features.state_dim() + POSITIONS + 1] }
    }

    fn d(&self) -> usize {
        self.theta.len() - POSITIONS - 1
    }

    pub fn value(&self, x: &[F], position: usize) -> F {
        let d = self.d();
        let mut v = self.theta[d + position.min(POSITIONS - 1)] + self.theta[d + POSITIONS];
        for (w, xv) in self.theta[..d].iter().zip(x) {
            v += *w * *xv;
        }
        v
    }

    fn accumulate(&self, x: &[F], position: usize, scale: F, grad: &mut [F]) {
        let d = self.d();
        for (g, xv) in grad[..d].iter_mut().zip(x) {
            *g += scale * *xv;
        }
        grad[d + position.min(POSITIONS - 1)] += scale;
        grad[d + POSITIONS] += scale;
    }
}

/// Per-member, per-token advantages and returns, fixed before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoTargets {
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

fn features<F: Scalar>(params: &PolicyParams<F>, batch: &GroupBatch) -> Vec<Vec<Prepared<F>>> {
    batch.members().map(|m| m.states.iter().map(|s| params.prepare(s)).collect()).collect()
}

/// GAE targets with the terminal reward on the final token.
pub fn ppo_targets<F: Scalar>(batch: &GroupBatch, params: &PolicyParams<F>, value: &ValueHead<F>, cfg: &PpoConfig) -> PpoTargets {
    let feats = features(params, batch);
    let mut advantages = Vec::new();
    let mut returns = Vec::new();
    for (m, preps) in batch.members().zip(&feats) {
        let mut vals = Vec::new();
        for (prep, toks) in preps.iter().zip(&m.tokens) {
            for k in 0..toks.len() {
                vals.push(value.value(&prep.x, k).as_f64());
            }
        }
        let mut rewards = vec![0.0; vals.len()];
        if let Some(r) = rewards.last_mut() {
            *r = m.reward;
        }
        let (a, r) = gae(&rewards, &vals, cfg.gamma, cfg.lambda);
        advantages.push(a);
        returns.push(r);
    }
    PpoTargets { advantages, returns }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoLossAndGrad<F> {
    pub loss: F,
    pub policy_grad: Vec<F>,
    pub value_grad: Vec<F>,
    pub value_loss: f64,
    pub diag: Diagnostics,
}

pub fn ppo_loss_and_grad<F: Scalar>(
    batch: &GroupBatch,
    targets: &PpoTargets,
    params: &PolicyParams<F>,
    old: &PolicyParams<F>,
    value: &ValueHead<F>,
    cfg: &PpoConfig,
) -> Result<PpoLossAndGrad<F>, TrainError> {
    batch.check_on_policy(old.version)?;
    let members: Vec<_> = batch.members().collect();
    let n_tokens: usize = members.iter().map(|m| m.tokens.iter().map(Vec::len).sum::<usize>()).sum();
    let norm = n_tokens.max(1) as f64;
    let opts = MaskOptions::default();
    type Part<F> = (f64, f64, Vec<F>, Vec<F>, usize, f64, usize);
    let parts: Vec<Result<Part<F>, TrainError>> = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut pg = vec![F::zero(); params.n_params()];
            let mut vg = vec![F::zero(); value.theta.len()];
            let (mut pl, mut vl, mut clipped, mut ratio, mut steps) = (0.0, 0.0, 0, 0.0, 0);
            let mut t = 0;
            for (state, toks) in m.states.iter().zip(&m.tokens) {
                let prep = params.prepare(state);
                let pass = params.forward_tokens(&prep, toks, opts)?;
                let lold = old.forward_tokens(&prep, toks, opts)?.logprobs;
                let mut dl = vec![F::zero(); toks.len()];
                for k in 0..toks.len() {
                    let adv = targets.advantages[i][t];
                    let ret = targets.returns[i][t];
                    let r = (pass.logprobs[k].as_f64() - lold[k].as_f64()).exp();
                    let (s, ds_dr) = clipped_surrogate(r, adv, cfg.clip_eps);
                    pl -= s / norm;
                    dl[k] = F::lit(-ds_dr * r / norm);
                    if (r - 1.0).abs() > cfg.clip_eps {
                        clipped += 1;
                    }
                    ratio += r;
                    let v = value.value(&prep.x, k).as_f64();
                    vl += cfg.value_coef * (v - ret) * (v - ret) / norm;
                    value.accumulate(&prep.x, k, F::lit(2.0 * cfg.value_coef * (v - ret) / norm), &mut vg);
                    t += 1;
                }
                params.backward(&prep, &pass, &dl, &mut pg);
                steps += 1;
            }
            Ok((pl, vl, pg, vg, clipped, ratio, steps))
        })
        .collect();
    let mut policy_grad = vec![F::zero(); params.n_params()];
    let mut value_grad = vec![F::zero(); value.theta.len()];
    let (mut pl, mut vl, mut clipped, mut ratio, mut steps) = (0.0, 0.0, 0, 0.0, 0);
    for p in parts {
        let (a, b, pg, vg, c, r, s) = p?;
        pl += a;
        vl += b;
        for (g, v) in policy_grad.iter_mut().zip(&pg) {
            *g += *v;
        }
        for (g, v) in value_grad.iter_mut().zip(&vg) {
            *g += *v;
        }
        clipped += c;
        ratio += r;
        steps += s;
    }
    Ok(PpoLossAndGrad {
        loss: F::lit(pl + vl),
        policy_grad,
        value_grad,
        value_loss: vl,
        diag: Diagnostics {
            clip_fraction: clipped as f64 / norm,
            mean_kl: 0.0,
            mean_ratio: ratio / norm,
            timesteps: steps,
            tokens: n_tokens,
        },
    })
}
