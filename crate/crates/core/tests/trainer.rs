use std::sync::Arc;

use mobirl_core::cmdp::{AgentState, Context};
use mobirl_core::policy::{MaskOptions, PolicyConfig, PolicyParams};
use mobirl_core::sim::{build_default_suite, EnvConfig, LatencyModel, SimEnv, Suite, SuiteConfig};
use mobirl_core::trainer::{
    compute_advantages, gae, grpo_loss_and_grad, ppo_loss_and_grad, ppo_targets, Group, GroupBatch, GrpoConfig, Member, PpoConfig,
    RatioMode, TrainError, ValueHead,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    suite: Arc<Suite>,
    contexts: Vec<Context>,
    base: PolicyParams<f64>,
}

fn fixture() -> Fixture {
    let suite = Arc::new(build_default_suite(&SuiteConfig::default()));
    let contexts = suite.catalog.templates().step_by(5).map(|(app, t)| Context::new(app, t, 11).unwrap()).collect();
    let mut c = PolicyConfig::new(suite.app_names());
    c.hidden = 5;
    let base = PolicyParams::init(c);
    Fixture { suite, contexts, base }
}

fn jitter(p: &PolicyParams<f64>, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams<f64> {
    let mut q = p.clone();
    for v in q.theta.iter_mut() {
        *v += rng.gen_range(-scale..scale);
    }
    q
}

/// Short episodes sampled from `old` on the simulator.
fn episode(fx: &Fixture, old: &PolicyParams<f64>, ctx: &Context, max_steps: usize, rng: &mut ChaCha8Rng) -> (Vec<AgentState>, Vec<Vec<u32>>) {
    let mut env = SimEnv::new(fx.suite.clone(), EnvConfig { latency: LatencyModel::zero(), ..Default::default() });
    let obs = env.reset(ctx, 0).unwrap();
    let mut s = AgentState::new(ctx.instruction.clone(), obs, 4);
    let (mut states, mut tokens) = (Vec::new(), Vec::new());
    for _ in 0..max_steps {
        let smp = old.sample_action(&s, 1.0, rng, MaskOptions::default());
        states.push(s.clone());
        tokens.push(smp.token_ids.clone());
        let out = env.step(&smp.action).unwrap();
        if out.done {
            break;
        }
        s.advance(smp.action, out.observation);
    }
    (states, tokens)
}

fn random_batch(fx: &Fixture, old: &PolicyParams<f64>, rng: &mut ChaCha8Rng) -> GroupBatch {
    let n_groups = rng.gen_range(1..=2);
    let groups = (0..n_groups)
        .map(|_| {
            let ctx = fx.contexts[rng.gen_range(0..fx.contexts.len())].clone();
            let g = rng.gen_range(2..=3);
            let members = (0..g)
                .map(|_| {
                    let (states, tokens) = episode(fx, old, &ctx, rng.gen_range(1..=3), rng);
                    let reward = f64::from(rng.gen_bool(0.5) as u8);
                    Member { states, tokens, reward, true_reward: reward, version: old.version }
                })
                .collect();
            Group { context: ctx, members, dropped: 0 }
        })
        .collect();
    GroupBatch { groups, behavior_version: old.version }
}

/// Coordinates to probe: the largest gradient entries plus random ones.
fn probes(grad: &[f64], rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|a, b| grad[*b].abs().total_cmp(&grad[*a].abs()));
    let mut out: Vec<usize> = idx[..k.min(idx.len())].to_vec();
    for _ in 0..k {
        out.push(rng.gen_range(0..grad.len()));
    }
    out
}

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const SCALE_FLOOR: f64 = 1e-6;

fn check(name: &str, analytic: f64, fd: f64) {
    let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(SCALE_FLOOR);
    assert!(err <= REL_TOL, "{name}: analytic {analytic:e} vs central difference {fd:e} (rel {err:e})");
}

#[test]
fn grpo_gradient_matches_central_differences() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for case in 0..120 {
        let old = jitter(&fx.base, 0.3, &mut rng);
        let batch = random_batch(&fx, &old, &mut rng);
        let params = jitter(&old, [0.01, 0.1, 0.4][case % 3], &mut rng);
        let reference = jitter(&old, 0.2, &mut rng);
        let cfg = GrpoConfig {
            ratio_mode: if case % 2 == 0 { RatioMode::TimestepMean } else { RatioMode::PerToken },
            kl_beta: [0.0, 0.05, 0.5][case % 3],
            ..GrpoConfig::default()
        };
        let lg = grpo_loss_and_grad(&batch, &params, &old, &reference, &cfg).unwrap();
        let loss = |q: &PolicyParams<f64>| grpo_loss_and_grad(&batch, q, &old, &reference, &cfg).unwrap().loss;
        let mut q = params.clone();
        for i in probes(&lg.grad, &mut rng, 6) {
            q.theta[i] = params.theta[i] + H;
            let up = loss(&q);
            q.theta[i] = params.theta[i] - H;
            let down = loss(&q);
            q.theta[i] = params.theta[i];
            check(&format!("grpo case {case} param {i}"), lg.grad[i], (up - down) / (2.0 * H));
            checked += 1;
        }
    }
    assert!(checked >= 1200);
}

#[test]
fn ppo_gradient_matches_central_differences() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..110 {
        let old = jitter(&fx.base, 0.3, &mut rng);
        let batch = random_batch(&fx, &old, &mut rng);
        let params = jitter(&old, [0.01, 0.1, 0.4][case % 3], &mut rng);
        let mut value = ValueHead::zeros(&fx.base.config.features);
        for v in value.theta.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        let cfg = PpoConfig { gamma: [1.0, 0.9][case % 2], lambda: [1.0, 0.95, 0.5][case % 3], ..PpoConfig::default() };
        let targets = ppo_targets(&batch, &old, &value, &cfg);
        let lg = ppo_loss_and_grad(&batch, &targets, &params, &old, &value, &cfg).unwrap();
        let loss = |q: &PolicyParams<f64>, v: &ValueHead<f64>| ppo_loss_and_grad(&batch, &targets, q, &old, v, &cfg).unwrap().loss;

        let mut q = params.clone();
        for i in probes(&lg.policy_grad, &mut rng, 5) {
            q.theta[i] = params.theta[i] + H;
            let up = loss(&q, &value);
            q.theta[i] = params.theta[i] - H;
            let down = loss(&q, &value);
            q.theta[i] = params.theta[i];
            check(&format!("ppo case {case} policy {i}"), lg.policy_grad[i], (up - down) / (2.0 * H));
        }
        let mut w = value.clone();
        for i in probes(&lg.value_grad, &mut rng, 4) {
            w.theta[i] = value.theta[i] + H;
            let up = loss(&params, &w);
            w.theta[i] = value.theta[i] - H;
            let down = loss(&params, &w);
            w.theta[i] = value.theta[i];
            check(&format!("ppo case {case} value {i}"), lg.value_grad[i], (up - down) / (2.0 * H));
        }
    }
}

#[test]
fn uniform_groups_at_the_reference_give_zero_gradient() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let old = jitter(&fx.base, 0.3, &mut rng);
        let mut batch = random_batch(&fx, &old, &mut rng);
        let r = f64::from(rng.gen_bool(0.5) as u8);
        for m in batch.groups.iter_mut().flat_map(|g| g.members.iter_mut()) {
            m.reward = r;
        }
        let lg = grpo_loss_and_grad(&batch, &old, &old, &old, &GrpoConfig::default()).unwrap();
        assert!(lg.grad.iter().all(|g| *g == 0.0));
        assert_eq!(lg.loss, 0.0);
        assert!((lg.diag.mean_ratio - 1.0).abs() < 1e-12);
    }
}

#[test]
fn stale_batch_is_rejected() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let old = fx.base.clone();
    let batch = random_batch(&fx, &old, &mut rng);
    let mut newer = old.clone();
    newer.version += 1;
    let err = grpo_loss_and_grad(&batch, &newer, &newer, &old, &GrpoConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::OnPolicy { .. }));
}

#[test]
fn grpo_gradient_is_deterministic() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let old = jitter(&fx.base, 0.3, &mut rng);
    let batch = random_batch(&fx, &old, &mut rng);
    let params = jitter(&old, 0.1, &mut rng);
    let a = grpo_loss_and_grad(&batch, &params, &old, &old, &GrpoConfig::default()).unwrap();
    let b = grpo_loss_and_grad(&batch, &params, &old, &old, &GrpoConfig::default()).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn two_of_eight_successes() {
    let a = compute_advantages(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    // mean 1/4, population std sqrt(3)/4
    let (mu, sd) = (0.25f64, 3f64.sqrt() / 4.0);
    for (i, v) in a.iter().enumerate() {
        let r = if i < 2 { 1.0 } else { 0.0 };
        assert!((v - (r - mu) / sd).abs() < 1e-12);
    }
    assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
    assert!((a[7] + 1.0 / 3f64.sqrt()).abs() < 1e-12);
}

/// A_t = sum_l (gamma lambda)^l delta_{t+l}, quadratic in T.
fn gae_oracle(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { 0.0 };
    (0..n)
        .map(|t| (t..n).map(|u| (gamma * lambda).powi((u - t) as i32) * (rewards[u] + gamma * v(u + 1) - v(u))).sum())
        .collect()
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 1..16)) {
        let a = compute_advantages(&rewards);
        prop_assert_eq!(a.len(), rewards.len());
        let n = a.len() as f64;
        if rewards.iter().all(|r| *r == rewards[0]) {
            prop_assert!(a.iter().all(|v| *v == 0.0));
        } else {
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
            for (r, v) in rewards.iter().zip(&a) {
                prop_assert_eq!(*r == 1.0, *v > 0.0);
            }
        }
    }

    #[test]
    fn advantages_ignore_affine_rescaling(rewards in prop::collection::vec(0.0f64..1.0, 2..12), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let a = compute_advantages(&rewards);
        let b = compute_advantages(&rewards.iter().map(|r| scale * r + shift).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gae_matches_direct_sum(
        values in prop::collection::vec(-1.0f64..1.0, 1..24),
        terminal in 0.0f64..=1.0,
        gamma in 0.5f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rewards = vec![0.0; values.len()];
        *rewards.last_mut().unwrap() = terminal;
        let (adv, ret) = gae(&rewards, &values, gamma, lambda);
        let oracle = gae_oracle(&rewards, &values, gamma, lambda);
        for t in 0..values.len() {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-10);
            prop_assert!((ret[t] - adv[t] - values[t]).abs() < 1e-12);
        }
        // lambda = 1 gives the discounted return
        let (_, mc) = gae(&rewards, &values, gamma, 1.0);
        for (t, r) in mc.iter().enumerate() {
            prop_assert!((r - terminal * gamma.powi((values.len() - 1 - t) as i32)).abs() < 1e-10);
        }
    }
}
