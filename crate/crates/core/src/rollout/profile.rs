//! Throughput profiling across scheduling modes and pool sizes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{collect, CollectError, CollectMode, Decode, InferenceCost, RolloutPlan, WorkerPool};
use crate::cmdp::Context;
use crate::policy::{MaskOptions, PolicyParams};
use crate::scalar::Scalar;
use crate::sim::{ClockMode, EnvConfig, Suite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub pool_sizes: Vec<usize>,
    pub rollouts: usize,
    /// Every profiled episode runs exactly this many steps.
    pub episode_steps: usize,
    pub seed: u64,
    pub env: EnvConfig,
    pub linger_ms: f64,
    pub inference_batch_max: usize,
    pub inference_cost: InferenceCost,
    pub clock: ClockMode,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            pool_sizes: vec![1, 4, 8, 16],
            rollouts: 16,
            episode_steps: 15,
            seed: 0,
            env: EnvConfig::default(),
            linger_ms: 0.002,
            inference_batch_max: 16,
            inference_cost: InferenceCost::default(),
            clock: ClockMode::Simulated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub mode: CollectMode,
    pub pool_size: usize,
    pub wall_ms: f64,
    pub env_ms: f64,
    pub speedup_vs_sequential: f64,
    /// sync wall / async wall - 1, on the async and sync rows.
    pub async_sync_gap: Option<f64>,
    /// No schedule on this pool can finish the same traces faster.
    pub lower_bound_ms: f64,
    pub failed: usize,
}

impl ProfileRow {
    pub fn csv_header() -> &'static str {
        "mode,pool_size,wall_ms,env_ms,speedup_vs_sequential,async_sync_gap,lower_bound_ms,failed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.4},{},{:.3},{}",
            self.mode,
            self.pool_size,
            self.wall_ms,
            self.env_ms,
            self.speedup_vs_sequential,
            self.async_sync_gap.map_or_else(String::new, |g| format!("{g:.4}")),
            self.lower_bound_ms,
            self.failed
        )
    }
}

/// Makespan lower bound for latency traces (one per session) on `pool`
/// workers: the longest session, or the total work spread evenly.
pub fn des_lower_bound(traces: &[Vec<f64>], pool: usize) -> f64 {
    let sums: Vec<f64> = traces.iter().map(|t| t.iter().sum()).collect();
    let longest = sums.iter().cloned().fold(0.0, f64::max);
    let total: f64 = sums.iter().sum();
    longest.max(total / pool.max(1) as f64)
}

/// Collects the same fixed-length rollouts under every mode and pool size.
pub fn profile<F: Scalar>(
    suite: Arc<Suite>,
    contexts: &[Context],
    policy: &PolicyParams<F>,
    cfg: &ProfileConfig,
) -> Result<Vec<ProfileRow>, CollectError> {
    if contexts.is_empty() {
        return Err(CollectError::Plan("no contexts to profile".into()));
    }
    let batch: Vec<(Context, usize)> = (0..cfg.rollouts).map(|i| (contexts[i % contexts.len()].clone(), 1)).collect();
    let mut env = cfg.env.clone();
    env.step_cap = cfg.episode_steps;
    env.clock = cfg.clock;
    let mut rows = Vec::new();
    for &p in &cfg.pool_sizes {
        let mut walls = Vec::new();
        for mode in CollectMode::ALL {
            let pool = WorkerPool::local(p, suite.clone(), &env);
            let mut plan = RolloutPlan::new(batch.clone(), mode, cfg.seed);
            plan.step_cap = cfg.episode_steps;
            plan.decode = Decode::Sampled(1.0);
            plan.mask = MaskOptions { forbid_terminal: true };
            plan.linger_ms = cfg.linger_ms;
            plan.inference_batch_max = cfg.inference_batch_max;
            plan.inference_cost = cfg.inference_cost;
            let out = collect(&plan, &pool, policy, cfg.clock)?;
            let traces: Vec<Vec<f64>> = out.records.iter().map(|r| r.trajectory.wall_times.clone()).collect();
            let bound = match mode {
                CollectMode::Sequential => des_lower_bound(&traces, 1),
                _ => des_lower_bound(&traces, p),
            };
            walls.push((mode, out.report.wall_ms, out.report.env_ms, bound, out.failed()));
        }
        let wall_of = |m: CollectMode| walls.iter().find(|w| w.0 == m).map(|w| w.1).expect("all modes ran");
        let seq = wall_of(CollectMode::Sequential);
        let gap = wall_of(CollectMode::SyncBarrier) / wall_of(CollectMode::Async) - 1.0;
        for (mode, wall, env_ms, bound, failed) in walls {
            rows.push(ProfileRow {
                mode,
                pool_size: p,
                wall_ms: wall,
                env_ms,
                speedup_vs_sequential: seq / wall,
                async_sync_gap: (mode != CollectMode::Sequential).then_some(gap),
                lower_bound_ms: bound,
                failed,
            });
        }
    }
    Ok(rows)
}
