//! Behavior cloning on scripted solutions, used to warm-start a policy.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_update, AdamConfig, AdamState};
use super::TrainError;
use crate::cmdp::{AgentState, Context};
use crate::policy::{MaskOptions, PolicyConfig, PolicyParams};
use crate::scalar::Scalar;
use crate::sim::solver::solve;
use crate::sim::{EnvConfig, LatencyModel, SimEnv, Suite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub steps: u64,
    /// Demonstrations per step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Demonstration contexts for `warm_start`, spread evenly over the pool.
    pub demos: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { steps: 150, batch: 8, lr: 3e-3, seed: 0, demos: 100 }
    }
}

/// A scripted episode as (state, tokens) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub states: Vec<AgentState>,
    pub tokens: Vec<Vec<u32>>,
}

/// Replays the scripted solution of `ctx` through the token codec.
pub fn demonstration<F: Scalar>(params: &PolicyParams<F>, suite: &Arc<Suite>, ctx: &Context, history_window: usize) -> Result<Demo, TrainError> {
    let actions = solve(suite, ctx).map_err(|e| TrainError::Config(e.to_string()))?;
    let cfg = EnvConfig { latency: LatencyModel::zero(), ..EnvConfig::default() };
    let mut env = SimEnv::new(suite.clone(), cfg);
    let obs = env.reset(ctx, 0).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut state = AgentState::new(ctx.instruction.clone(), obs, history_window);
    let mut demo = Demo { states: Vec::new(), tokens: Vec::new() };
    for a in actions {
        let tokens = params.vocab().encode(&a, &state.observation).map_err(|e| TrainError::Config(e.to_string()))?;
        let decoded = params.vocab().decode(&tokens, &state.observation).map_err(|e| TrainError::Config(e.to_string()))?;
        let out = env.step(&decoded).map_err(|e| TrainError::Config(e.to_string()))?;
        demo.states.push(state.clone());
        demo.tokens.push(tokens);
        state.advance(decoded, out.observation);
    }
    Ok(demo)
}

/// Mean negative log-likelihood of `demos` and its gradient.
pub fn nll_and_grad<F: Scalar>(params: &PolicyParams<F>, demos: &[&Demo]) -> Result<(f64, Vec<F>), TrainError> {
    let n: usize = demos.iter().map(|d| d.tokens.iter().map(Vec::len).sum::<usize>()).sum();
    let scale = F::lit(-1.0 / n.max(1) as f64);
    let mut grad = vec![F::zero(); params.n_params()];
    let mut loss = 0.0;
    for d in demos {
        for (s, t) in d.states.iter().zip(&d.tokens) {
            let prep = params.prepare(s);
            let pass = params.forward_tokens(&prep, t, MaskOptions::default())?;
            loss -= pass.logprobs.iter().map(|v| v.as_f64()).sum::<f64>();
            params.backward(&prep, &pass, &vec![scale; t.len()], &mut grad);
        }
    }
    Ok((loss / n.max(1) as f64, grad))
}

/// Runs `cfg.steps` Adam steps of behavior cloning in place. Returns the
/// loss per step.
pub fn behavior_clone<F: Scalar>(params: &mut PolicyParams<F>, demos: &[Demo], cfg: &BcConfig) -> Result<Vec<f64>, TrainError> {
    if demos.is_empty() || cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let adam = AdamConfig { lr_max: cfg.lr, warmup_steps: 0, ..AdamConfig::default() };
    let mut state = AdamState::new(params.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    for step in 1..=cfg.steps {
        let pick: Vec<&Demo> = (0..cfg.batch.max(1)).map(|_| &demos[rng.gen_range(0..demos.len())]).collect();
        let (loss, grad) = nll_and_grad(params, &pick)?;
        adam_update(&mut params.theta, &grad, &mut state, step, &adam)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Fresh policy cloned on scripted solutions of `cfg.demos` contexts taken
/// at an even stride through `contexts`.
pub fn warm_start<F: Scalar>(
    config: PolicyConfig,
    suite: &Arc<Suite>,
    contexts: &[Context],
    cfg: &BcConfig,
) -> Result<(PolicyParams<F>, Vec<f64>), TrainError> {
    let mut params = PolicyParams::init(config);
    if cfg.demos == 0 || contexts.is_empty() {
        return Ok((params, Vec::new()));
    }
    let stride = (contexts.len() / cfg.demos).max(1);
    let window = params.config.history_window;
    let demos = contexts
        .iter()
        .step_by(stride)
        .take(cfg.demos)
        .map(|c| demonstration(&params, suite, c, window))
        .collect::<Result<Vec<_>, _>>()?;
    let losses = behavior_clone(&mut params, &demos, cfg)?;
    Ok((params, losses))
}
