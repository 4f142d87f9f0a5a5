use std::sync::Arc;

use mobirl_core::cmdp::{ActionKind, AgentState, Context};
use mobirl_core::policy::{kl_estimate, MaskOptions, PolicyConfig, PolicyParams};
use mobirl_core::sim::{build_default_suite, solver::solve, EnvConfig, LatencyModel, SimEnv, SuiteConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// States visited by the scripted solution of a few tasks.
fn states() -> Vec<AgentState> {
    let suite = Arc::new(build_default_suite(&SuiteConfig::default()));
    let mut out = Vec::new();
    for (app, t) in suite.catalog.templates().step_by(9) {
        let ctx = Context::new(app, t, 4).unwrap();
        let actions = solve(&suite, &ctx).unwrap();
        let mut env = SimEnv::new(suite.clone(), EnvConfig { latency: LatencyModel::zero(), ..Default::default() });
        let obs = env.reset(&ctx, 0).unwrap();
        let mut s = AgentState::new(ctx.instruction.clone(), obs, 8);
        for a in actions {
            out.push(s.clone());
            let o = env.step(&a).unwrap();
            s.advance(a, o.observation);
        }
    }
    out
}

fn config() -> PolicyConfig {
    let suite = build_default_suite(&SuiteConfig::default());
    let mut c = PolicyConfig::new(suite.app_names());
    c.hidden = 6;
    c
}

fn randomized(seed: u64, scale: f64) -> PolicyParams<f64> {
    let mut p = PolicyParams::<f64>::init(config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.theta.iter_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    p
}

#[test]
fn gradient_matches_central_differences() {
    let all = states();
    let eps = 1e-5;
    for (case, seed) in [3u64, 8, 21].into_iter().enumerate() {
        let p = randomized(seed, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &all[(case * 17 + 5) % all.len()];
        let smp = p.sample_action(s, 1.0, &mut rng, MaskOptions::default());
        let (_, g) = p.logprob_and_grad(s, &smp.token_ids, MaskOptions::default()).unwrap();
        let f = |q: &PolicyParams<f64>| -> f64 { q.token_logprobs(s, &smp.token_ids, MaskOptions::default()).unwrap().iter().sum() };
        let mut q = p.clone();
        let mut checked = 0;
        #[allow(clippy::needless_range_loop)]
        for i in 0..p.n_params() {
            // every parameter that can move the objective, plus a sample of the rest
            if g[i] == 0.0 && i % 97 != 0 {
                continue;
            }
            q.theta[i] = p.theta[i] + eps;
            let up = f(&q);
            q.theta[i] = p.theta[i] - eps;
            let down = f(&q);
            q.theta[i] = p.theta[i];
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3);
            assert!(err <= 1e-4, "param {i}: analytic {} numeric {fd}", g[i]);
            checked += 1;
        }
        assert!(checked > 100);
    }
}

#[test]
fn sampling_frequencies_match_probabilities() {
    let all = states();
    let p = randomized(1, 1.0);
    let s = all.iter().find(|s| s.observation.focused_field().is_some()).unwrap();
    let prep = p.prepare(s);
    let probs: Vec<f64> = p.kind_logprobs(&prep, MaskOptions::default()).iter().map(|v| v.exp()).collect();
    let n = 40_000;
    let mut counts = [0usize; 9];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..n {
        let smp = p.sample_action(s, 1.0, &mut rng, MaskOptions::default());
        counts[smp.token_ids[0] as usize] += 1;
    }
    for k in 0..9 {
        let freq = counts[k] as f64 / n as f64;
        let sd = (probs[k] * (1.0 - probs[k]) / n as f64).sqrt();
        assert!((freq - probs[k]).abs() <= 5.0 * sd + 1e-9, "kind {k}: {freq} vs {}", probs[k]);
    }
    // Type is only drawn when a field is focused
    let unfocused = all.iter().find(|s| s.observation.focused_field().is_none()).unwrap();
    for _ in 0..2000 {
        let smp = p.sample_action(unfocused, 1.0, &mut rng, MaskOptions::default());
        assert_ne!(smp.action.kind(), ActionKind::Type);
    }
}

#[test]
fn kl_estimate_is_unbiased_for_kind_position() {
    let all = states();
    let p = randomized(2, 0.8);
    let r = randomized(9, 0.8);
    let s = &all[3];
    let lp = p.kind_logprobs(&p.prepare(s), MaskOptions::default());
    let lr = r.kind_logprobs(&r.prepare(s), MaskOptions::default());
    let exact: f64 = lp.iter().zip(&lr).filter(|(a, _)| a.is_finite()).map(|(a, b)| a.exp() * (a - b)).sum();
    let expected: f64 = lp.iter().zip(&lr).filter(|(a, _)| a.is_finite()).map(|(a, b)| a.exp() * kl_estimate(*a, *b)).sum();
    assert!((exact - expected).abs() < 1e-12);
    assert!(exact >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_estimate_nonnegative(a in -30.0f64..0.0, b in -30.0f64..0.0) {
        prop_assert!(kl_estimate(a, b) >= 0.0);
    }

    #[test]
    fn sampled_tokens_decode_and_score(seed in any::<u64>(), idx in 0usize..1000, temp in 0.3f64..2.0) {
        let all = states();
        let p = randomized(seed, 1.0);
        let s = &all[idx % all.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let smp = p.sample_action(s, temp, &mut rng, MaskOptions::default());
        prop_assert!(smp.token_ids.len() <= 2);
        prop_assert_eq!(p.vocab().decode(&smp.token_ids, &s.observation).unwrap(), smp.action.clone());
        let lp = p.token_logprobs(s, &smp.token_ids, MaskOptions::default()).unwrap();
        prop_assert!(lp.iter().all(|v| v.is_finite() && *v <= 0.0));
        if (temp - 1.0).abs() < 1e-12 {
            prop_assert_eq!(lp, smp.token_logprobs);
        }
    }
}
