use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use mobirl_core::cmdp::{Context, RolloutStatus};
use mobirl_core::policy::{MaskOptions, PolicyConfig, PolicyParams};
use mobirl_core::rollout::{collect, des_lower_bound, CollectMode, Decode, RolloutPlan, WorkerPool};
use mobirl_core::sim::{build_default_suite, ClockMode, EnvConfig, Suite, SuiteConfig};

fn suite() -> Arc<Suite> {
    Arc::new(build_default_suite(&SuiteConfig::default()))
}

fn contexts(s: &Suite, n: usize) -> Vec<Context> {
    s.catalog.templates().take(n).map(|(a, t)| Context::new(a, t, 2).unwrap()).collect()
}

fn policy(s: &Suite) -> PolicyParams<f64> {
    PolicyParams::init(PolicyConfig::new(s.app_names()))
}

fn fixed_length(mode: CollectMode, batch: Vec<(Context, usize)>) -> RolloutPlan {
    let mut p = RolloutPlan::new(batch, mode, 5);
    p.step_cap = 15;
    p.mask = MaskOptions { forbid_terminal: true };
    p
}

fn env15() -> EnvConfig {
    EnvConfig { step_cap: 15, ..EnvConfig::default() }
}

#[test]
fn trajectories_do_not_depend_on_mode_or_batching() {
    let s = suite();
    let pol = policy(&s);
    let batch: Vec<_> = contexts(&s, 4).into_iter().map(|c| (c, 3)).collect();
    let mut reference = None;
    for mode in CollectMode::ALL {
        for (workers, bmax) in [(1, 1), (5, 1), (12, 16)] {
            let mut plan = RolloutPlan::new(batch.clone(), mode, 11);
            plan.inference_batch_max = bmax;
            let pool = WorkerPool::local(workers, s.clone(), &EnvConfig::default());
            let out = collect(&plan, &pool, &pol, ClockMode::Simulated).unwrap();
            assert_eq!(out.records.len(), 12);
            let trajs: Vec<_> = out.records.iter().map(|r| r.trajectory.clone()).collect();
            for r in &out.records {
                assert!(r.watermarks.iter().all(|w| *w == r.session_id));
                assert_eq!(r.states.len(), r.trajectory.steps.len());
                r.trajectory.validate(20).unwrap();
            }
            match &reference {
                None => reference = Some(trajs),
                Some(t) => assert_eq!(t, &trajs, "{mode} workers={workers} batch={bmax}"),
            }
        }
    }
}

#[test]
fn single_worker_modes_take_equal_time() {
    let s = suite();
    let pol = policy(&s);
    let batch: Vec<_> = contexts(&s, 6).into_iter().map(|c| (c, 1)).collect();
    let walls: Vec<f64> = CollectMode::ALL
        .iter()
        .map(|m| {
            let pool = WorkerPool::local(1, s.clone(), &env15());
            collect(&fixed_length(*m, batch.clone()), &pool, &pol, ClockMode::Simulated).unwrap().report.wall_ms
        })
        .collect();
    assert_eq!(walls[0], walls[1]);
    assert_eq!(walls[1], walls[2]);
}

/// Independent replay of the barrier schedule: every macro-step pays one
/// inference batch and then the slowest environment.
#[test]
fn sync_barrier_matches_trace_oracle_and_async_meets_bound() {
    let s = suite();
    let pol = policy(&s);
    let batch: Vec<_> = contexts(&s, 16).into_iter().map(|c| (c, 1)).collect();
    let pool = WorkerPool::local(16, s.clone(), &env15());
    let plan = fixed_length(CollectMode::SyncBarrier, batch.clone());
    let sync = collect(&plan, &pool, &pol, ClockMode::Simulated).unwrap();
    let traces: Vec<Vec<f64>> = sync.records.iter().map(|r| r.trajectory.wall_times.clone()).collect();
    let cost = plan.inference_cost.per_batch_ms + 16.0 * plan.inference_cost.per_item_ms;
    let oracle: f64 = (0..15).map(|k| cost + traces.iter().map(|t| t[k]).fold(0.0, f64::max)).sum();
    assert!((sync.report.wall_ms - oracle).abs() < 1e-9, "{} vs {oracle}", sync.report.wall_ms);

    let pool = WorkerPool::local(16, s.clone(), &env15());
    let aplan = fixed_length(CollectMode::Async, batch);
    let asy = collect(&aplan, &pool, &pol, ClockMode::Simulated).unwrap();
    let bound = des_lower_bound(&traces, 16);
    assert!(asy.report.wall_ms >= bound);
    assert!(asy.report.wall_ms < sync.report.wall_ms);
    // accounted time fits in the workers' wall time
    for r in [&asy.report, &sync.report] {
        assert!(r.env_ms <= r.wall_ms * r.pool_size as f64 + 1e-9);
        assert_eq!(r.steps, 16 * 15);
    }
}

#[test]
fn killed_worker_fails_only_its_session() {
    let s = suite();
    let pol = policy(&s);
    let mut env = env15();
    env.clock = ClockMode::Real;
    let (pool, switches) = WorkerPool::local_with_switches(16, s.clone(), &env);
    let batch: Vec<_> = contexts(&s, 16).into_iter().map(|c| (c, 1)).collect();
    let plan = fixed_length(CollectMode::Async, batch);
    let victim = 7;
    let out = std::thread::scope(|sc| {
        sc.spawn(|| {
            std::thread::sleep(Duration::from_millis(15));
            switches[victim].store(true, Ordering::SeqCst);
        });
        collect(&plan, &pool, &pol, ClockMode::Real).unwrap()
    });
    let failed: Vec<_> = out.records.iter().filter(|r| r.status == RolloutStatus::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].worker, victim);
    assert!(out.records.iter().filter(|r| r.worker != victim).all(|r| r.status == RolloutStatus::Truncated && r.trajectory.steps.len() == 15));
    assert_eq!(out.report.failed, 1);
    // the restarted worker serves the next collection
    let pool_ok = collect(&plan, &pool, &pol, ClockMode::Real).unwrap();
    assert_eq!(pool_ok.failed(), 0);
}

#[test]
fn greedy_decoding_is_deterministic() {
    let s = suite();
    let pol = policy(&s);
    let batch: Vec<_> = contexts(&s, 3).into_iter().map(|c| (c, 2)).collect();
    let mut plan = RolloutPlan::new(batch, CollectMode::Async, 1);
    plan.decode = Decode::Greedy;
    let pool = WorkerPool::local(4, s.clone(), &EnvConfig::default());
    let a = collect(&plan, &pool, &pol, ClockMode::Simulated).unwrap();
    let b = collect(&plan, &pool, &pol, ClockMode::Simulated).unwrap();
    let ta: Vec<_> = a.records.iter().map(|r| &r.trajectory).collect();
    let tb: Vec<_> = b.records.iter().map(|r| &r.trajectory).collect();
    assert_eq!(ta, tb);
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
}
