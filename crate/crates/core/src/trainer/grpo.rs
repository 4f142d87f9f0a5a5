//! Clipped group-relative surrogate with a per-token KL penalty.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::compute_advantages;
use super::batch::{GroupBatch, Member};
use super::TrainError;
use crate::policy::{kl_estimate, kl_estimate_dlogp, MaskOptions, PolicyParams};
use crate::scalar::Scalar;

/// How token log-ratios combine within a timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// r = exp(mean of token log-ratios), one surrogate per timestep.
    #[default]
    TimestepMean,
    /// One surrogate per token, averaged over the timestep.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub ratio_mode: RatioMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { clip_eps: 0.2, kl_beta: 0.05, ratio_mode: RatioMode::TimestepMean }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub timesteps: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGrad<F> {
    pub loss: F,
    pub grad: Vec<F>,
    pub diag: Diagnostics,
}

/// Surrogate min(r A, clip(r) A) and its derivative in r.
pub fn clipped_surrogate(r: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = r * adv;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * adv;
    if clipped < unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, adv)
    }
}

struct Partial<F> {
    loss: f64,
    grad: Vec<F>,
    clipped: usize,
    kl: f64,
    ratio: f64,
    steps: usize,
    tokens: usize,
}

#[allow(clippy::too_many_arguments)]
fn member_terms<F: Scalar>(
    m: &Member,
    adv: f64,
    norm: f64,
    params: &PolicyParams<F>,
    old: &PolicyParams<F>,
    reference: &PolicyParams<F>,
    cfg: &GrpoConfig,
) -> Result<Partial<F>, TrainError> {
    let opts = MaskOptions::default();
    let mut p = Partial { loss: 0.0, grad: vec![F::zero(); params.n_params()], clipped: 0, kl: 0.0, ratio: 0.0, steps: 0, tokens: 0 };
    for (state, tokens) in m.states.iter().zip(&m.tokens) {
        let prep = params.prepare(state);
        let pass = params.forward_tokens(&prep, tokens, opts)?;
        let lold = old.forward_tokens(&prep, tokens, opts)?.logprobs;
        let lref = if cfg.kl_beta != 0.0 { Some(reference.forward_tokens(&prep, tokens, opts)?.logprobs) } else { None };
        let k = tokens.len() as f64;
        let lt: Vec<f64> = pass.logprobs.iter().map(|v| v.as_f64()).collect();
        let lo: Vec<f64> = lold.iter().map(|v| v.as_f64()).collect();
        let mut dl = vec![0.0; tokens.len()];
        match cfg.ratio_mode {
            RatioMode::TimestepMean => {
                let mean = lt.iter().zip(&lo).map(|(a, b)| a - b).sum::<f64>() / k;
                let r = mean.exp();
                let (s, ds_dr) = clipped_surrogate(r, adv, cfg.clip_eps);
                p.loss -= s / norm;
                if (r - 1.0).abs() > cfg.clip_eps {
                    p.clipped += 1;
                }
                p.ratio += r;
                for d in dl.iter_mut() {
                    *d -= ds_dr * r / k / norm;
                }
            }
            RatioMode::PerToken => {
                let mut rs = 0.0;
                for (i, (a, b)) in lt.iter().zip(&lo).enumerate() {
                    let r = (a - b).exp();
                    let (s, ds_dr) = clipped_surrogate(r, adv, cfg.clip_eps);
                    p.loss -= s / k / norm;
                    dl[i] -= ds_dr * r / k / norm;
                    rs += r;
                }
                if (rs / k - 1.0).abs() > cfg.clip_eps {
                    p.clipped += 1;
                }
                p.ratio += rs / k;
            }
        }
        if let Some(lr) = &lref {
            let mut kl_step = 0.0;
            for (i, (a, b)) in lt.iter().zip(lr).enumerate() {
                let b = b.as_f64();
                kl_step += kl_estimate(*a, b) / k;
                dl[i] += cfg.kl_beta * kl_estimate_dlogp(*a, b) / k / norm;
            }
            p.loss += cfg.kl_beta * kl_step / norm;
            p.kl += kl_step;
        }
        let dlf: Vec<F> = dl.iter().map(|v| F::lit(*v)).collect();
        params.backward(&prep, &pass, &dlf, &mut p.grad);
        p.steps += 1;
        p.tokens += tokens.len();
    }
    Ok(p)
}

/// Loss and gradient over a batch; trajectories are processed in parallel
/// and reduced in batch order.
pub fn grpo_loss_and_grad<F: Scalar>(
    batch: &GroupBatch,
    params: &PolicyParams<F>,
    old: &PolicyParams<F>,
    reference: &PolicyParams<F>,
    cfg: &GrpoConfig,
) -> Result<LossAndGrad<F>, TrainError> {
    batch.check_on_policy(old.version)?;
    let norm = batch.total_timesteps().max(1) as f64;
    let mut work = Vec::new();
    for g in &batch.groups {
        let rewards: Vec<f64> = g.members.iter().map(|m| m.reward).collect();
        for (m, a) in g.members.iter().zip(compute_advantages(&rewards)) {
            work.push((m, a));
        }
    }
    let parts: Vec<Result<Partial<F>, TrainError>> =
        work.par_iter().map(|(m, a)| member_terms(m, *a, norm, params, old, reference, cfg)).collect();
    let mut grad = vec![F::zero(); params.n_params()];
    let mut loss = 0.0;
    let (mut clipped, mut kl, mut ratio, mut steps, mut tokens) = (0, 0.0, 0.0, 0, 0);
    for p in parts {
        let p = p?;
        loss += p.loss;
        for (g, v) in grad.iter_mut().zip(&p.grad) {
            *g += *v;
        }
        clipped += p.clipped;
        kl += p.kl;
        ratio += p.ratio;
        steps += p.steps;
        tokens += p.tokens;
    }
    let s = steps.max(1) as f64;
    Ok(LossAndGrad {
        loss: F::lit(loss),
        grad,
        diag: Diagnostics { clip_fraction: clipped as f64 / s, mean_kl: kl / s, mean_ratio: ratio / s, timesteps: steps, tokens },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2).0 - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2).0 + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 0.0, 0.2), (0.0, 0.0));
    }
}
