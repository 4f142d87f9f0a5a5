//! Group rollout collection over a worker pool.
//!
//! One scheduler owns all sessions and talks to the workers by message
//! passing. The same scheduler runs under a real clock (worker threads,
//! slept latencies) or a simulated one (discrete events on a virtual
//! timeline), so profiling runs are exact and reproducible.

mod driver;
pub mod pool;
pub mod profile;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{digest_state, Action, AgentState, Context, Observation, RolloutStatus, Trajectory, TrajectoryStep, DEFAULT_HISTORY_WINDOW, DEFAULT_STEP_CAP};
use crate::hashing;
use crate::policy::{MaskOptions, PolicyParams, Sampled};
use crate::scalar::Scalar;
use crate::sim::{ClockMode, StepOutcome};

pub use pool::{EnvFailure, EnvWorker, LocalWorker, WorkerPool};
pub use profile::{des_lower_bound, profile, ProfileConfig, ProfileRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectMode {
    Async,
    SyncBarrier,
    Sequential,
}

impl CollectMode {
    pub const ALL: [CollectMode; 3] = [CollectMode::Async, CollectMode::SyncBarrier, CollectMode::Sequential];

    pub fn label(self) -> &'static str {
        match self {
            CollectMode::Async => "async",
            CollectMode::SyncBarrier => "sync-barrier",
            CollectMode::Sequential => "sequential",
        }
    }
}

impl fmt::Display for CollectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CollectMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CollectMode::ALL
            .into_iter()
            .find(|m| m.label() == s || (s == "sync" && *m == CollectMode::SyncBarrier))
            .ok_or_else(|| format!("unknown mode `{s}` (async, sync-barrier, sequential)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sampled(f64),
}

/// Cost of one inference batch on the simulated clock, in scaled ms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceCost {
    pub per_batch_ms: f64,
    pub per_item_ms: f64,
}

impl Default for InferenceCost {
    fn default() -> Self {
        InferenceCost { per_batch_ms: 0.02, per_item_ms: 0.005 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPlan {
    /// (context, group size)
    pub batch: Vec<(Context, usize)>,
    pub mode: CollectMode,
    pub step_cap: usize,
    pub decode: Decode,
    pub inference_batch_max: usize,
    /// Async micro-batch linger, scaled ms (2 ms of device time at 1000x).
    pub linger_ms: f64,
    pub seed: u64,
    pub mask: MaskOptions,
    pub history_window: usize,
    pub inference_cost: InferenceCost,
}

impl RolloutPlan {
    pub fn new(batch: Vec<(Context, usize)>, mode: CollectMode, seed: u64) -> Self {
        RolloutPlan {
            batch,
            mode,
            step_cap: DEFAULT_STEP_CAP,
            decode: Decode::Sampled(1.0),
            inference_batch_max: 16,
            linger_ms: 0.002,
            seed,
            mask: MaskOptions::default(),
            history_window: DEFAULT_HISTORY_WINDOW,
            inference_cost: InferenceCost::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CollectError> {
        if self.batch.iter().any(|(_, g)| *g == 0) {
            return Err(CollectError::Plan("group size must be at least 1".into()));
        }
        if let Decode::Sampled(t) = self.decode {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CollectError::Plan(format!("temperature must be positive, got {t}")));
            }
        }
        if self.inference_batch_max == 0 {
            return Err(CollectError::Plan("inference_batch_max must be at least 1".into()));
        }
        if !(self.linger_ms >= 0.0) {
            return Err(CollectError::Plan("linger must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_sessions(&self) -> usize {
        self.batch.iter().map(|(_, g)| g).sum()
    }

    /// Episode and sampling seed of one group slot.
    pub fn session_seed(&self, ctx: &Context, slot: usize) -> u64 {
        hashing::combine(&[self.seed, ctx.key(), slot as u64])
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("worker pool is empty")]
    NoWorkers,
    #[error("every worker failed: {0}")]
    PoolDown(String),
}

/// One finished, truncated or failed session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub group: usize,
    pub slot: usize,
    pub session_id: u64,
    pub worker: usize,
    pub status: RolloutStatus,
    pub trajectory: Trajectory,
    /// Agent state before each step.
    #[serde(skip)]
    pub states: Vec<AgentState>,
    /// Session id stamped on every step as it was recorded.
    pub watermarks: Vec<u64>,
    pub policy_version: u64,
    pub failure: Option<EnvFailure>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub mode: String,
    pub pool_size: usize,
    pub wall_ms: f64,
    pub env_ms: f64,
    pub inference_ms: f64,
    pub idle_ms: Vec<f64>,
    pub steps: usize,
    pub steps_per_sec: f64,
    pub completed: usize,
    pub truncated: usize,
    pub failed: usize,
    pub inference_batches: usize,
}

impl ThroughputReport {
    pub fn csv_header() -> &'static str {
        "mode,pool_size,wall_ms,env_ms,inference_ms,steps,steps_per_sec,completed,truncated,failed,inference_batches"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{},{:.3},{},{},{},{}",
            self.mode,
            self.pool_size,
            self.wall_ms,
            self.env_ms,
            self.inference_ms,
            self.steps,
            self.steps_per_sec,
            self.completed,
            self.truncated,
            self.failed,
            self.inference_batches
        )
    }
}

#[derive(Clone, Debug)]
pub struct CollectOutput {
    /// In plan order: group, then slot.
    pub records: Vec<RolloutRecord>,
    pub report: ThroughputReport,
}

impl CollectOutput {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.status == RolloutStatus::Failed).count()
    }
}

/// Collects every group slot of `plan` once.
pub fn collect<F: Scalar>(
    plan: &RolloutPlan,
    pool: &WorkerPool,
    policy: &PolicyParams<F>,
    clock: ClockMode,
) -> Result<CollectOutput, CollectError> {
    plan.validate()?;
    if pool.size() == 0 {
        return Err(CollectError::NoWorkers);
    }
    match clock {
        ClockMode::Simulated => driver::run_simulated(plan, pool, policy),
        ClockMode::Real => driver::run_real(plan, pool, policy),
    }
}

// ---- scheduler ------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) enum Cmd {
    Reset { ctx: Context, seed: u64 },
    Step { action: Action },
    Restart,
}

#[derive(Clone, Debug)]
pub(crate) enum Reply {
    Reset(Result<Observation, EnvFailure>),
    Step(Result<StepOutcome, EnvFailure>),
    Restart(Result<(), EnvFailure>),
}

impl Reply {
    /// Environment-reported latency, used as the duration on the simulated clock.
    pub(crate) fn latency_ms(&self) -> f64 {
        match self {
            Reply::Step(Ok(o)) => o.latency_ms,
            _ => 0.0,
        }
    }
}

pub(crate) fn execute(worker: &mut dyn EnvWorker, cmd: &Cmd) -> Reply {
    match cmd {
        Cmd::Reset { ctx, seed } => Reply::Reset(worker.reset(ctx, *seed)),
        Cmd::Step { action } => Reply::Step(worker.step(action)),
        Cmd::Restart => {
            worker.abort();
            Reply::Restart(worker.restart())
        }
    }
}

struct Session {
    group: usize,
    slot: usize,
    ctx: Context,
    seed: u64,
    rng: ChaCha8Rng,
    worker: Option<usize>,
    state: Option<AgentState>,
    pending: Option<Sampled>,
    steps: Vec<TrajectoryStep>,
    states: Vec<AgentState>,
    wall_times: Vec<f64>,
    watermarks: Vec<u64>,
    outcome: Option<(RolloutStatus, u8, Option<u8>, Option<EnvFailure>)>,
}

pub(crate) struct Scheduler<'a, F: Scalar> {
    plan: &'a RolloutPlan,
    policy: &'a PolicyParams<F>,
    sessions: Vec<Session>,
    pending: VecDeque<usize>,
    idle: Vec<usize>,
    dead: Vec<bool>,
    on_worker: Vec<Option<usize>>,
    queue: VecDeque<(usize, f64)>,
    in_flight: usize,
    active: usize,
    finished: usize,
    pub(crate) steps: usize,
    pub(crate) batches: usize,
    last_failure: Option<EnvFailure>,
}

impl<'a, F: Scalar> Scheduler<'a, F> {
    pub(crate) fn new(plan: &'a RolloutPlan, policy: &'a PolicyParams<F>, n_workers: usize) -> Self {
        let mut sessions = Vec::new();
        for (g, (ctx, size)) in plan.batch.iter().enumerate() {
            for slot in 0..*size {
                let seed = plan.session_seed(ctx, slot);
                sessions.push(Session {
                    group: g,
                    slot,
                    ctx: ctx.clone(),
                    seed,
                    rng: ChaCha8Rng::seed_from_u64(seed),
                    worker: None,
                    state: None,
                    pending: None,
                    steps: Vec::new(),
                    states: Vec::new(),
                    wall_times: Vec::new(),
                    watermarks: Vec::new(),
                    outcome: None,
                });
            }
        }
        let pending = (0..sessions.len()).collect();
        Scheduler {
            plan,
            policy,
            sessions,
            pending,
            idle: (0..n_workers).rev().collect(),
            dead: vec![false; n_workers],
            on_worker: vec![None; n_workers],
            queue: VecDeque::new(),
            in_flight: 0,
            active: 0,
            finished: 0,
            steps: 0,
            batches: 0,
            last_failure: None,
        }
    }

    pub(crate) fn all_done(&self) -> bool {
        self.finished == self.sessions.len()
    }

    /// Failed when no worker is alive while sessions remain.
    pub(crate) fn pool_down(&self) -> Option<CollectError> {
        if !self.all_done() && self.dead.iter().all(|d| *d) {
            Some(CollectError::PoolDown(self.last_failure.as_ref().map_or_else(String::new, |f| f.to_string())))
        } else {
            None
        }
    }

    fn release(&mut self, w: usize) {
        self.on_worker[w] = None;
        // lowest id first
        let pos = self.idle.iter().position(|x| *x < w).unwrap_or(self.idle.len());
        self.idle.insert(pos, w);
    }

    /// Assigns waiting sessions to idle workers.
    pub(crate) fn start(&mut self) -> Vec<(usize, Cmd)> {
        let mut out = Vec::new();
        while !self.pending.is_empty() && !self.idle.is_empty() {
            if self.plan.mode == CollectMode::Sequential && self.active > 0 {
                break;
            }
            let s = self.pending.pop_front().expect("non-empty");
            let w = self.idle.pop().expect("non-empty");
            self.on_worker[w] = Some(s);
            self.sessions[s].worker = Some(w);
            self.active += 1;
            self.in_flight += 1;
            let sess = &self.sessions[s];
            out.push((w, Cmd::Reset { ctx: sess.ctx.clone(), seed: sess.seed }));
        }
        out
    }

    fn finish(&mut self, s: usize, status: RolloutStatus, reward: u8, true_reward: Option<u8>, failure: Option<EnvFailure>) {
        self.sessions[s].outcome = Some((status, reward, true_reward, failure));
        self.active -= 1;
        self.finished += 1;
    }

    pub(crate) fn on_reply(&mut self, w: usize, reply: Reply, now: f64) -> Vec<(usize, Cmd)> {
        let mut out = Vec::new();
        match reply {
            Reply::Restart(r) => {
                match r {
                    Ok(()) => self.release(w),
                    Err(f) => {
                        self.dead[w] = true;
                        self.last_failure = Some(f);
                    }
                }
                out.extend(self.start());
                return out;
            }
            Reply::Reset(r) => {
                self.in_flight -= 1;
                let s = self.on_worker[w].expect("reset reply from an assigned worker");
                match r {
                    Ok(obs) => {
                        let sess = &mut self.sessions[s];
                        sess.state = Some(AgentState::new(sess.ctx.instruction.clone(), obs, self.plan.history_window));
                        self.queue.push_back((s, now));
                    }
                    Err(f) => out.extend(self.fail(w, s, f)),
                }
            }
            Reply::Step(r) => {
                self.in_flight -= 1;
                let s = self.on_worker[w].expect("step reply from an assigned worker");
                match r {
                    Ok(o) => {
                        self.steps += 1;
                        let sess = &mut self.sessions[s];
                        let smp = sess.pending.take().expect("step was dispatched with a sample");
                        let mut state = sess.state.take().expect("state present while stepping");
                        sess.steps.push(TrajectoryStep {
                            state_digest: digest_state(&state),
                            token_ids: smp.token_ids,
                            token_logprobs_behavior: smp.token_logprobs,
                            action: smp.action.clone(),
                        });
                        sess.wall_times.push(o.latency_ms);
                        sess.watermarks.push(s as u64 + 1);
                        sess.states.push(state.clone());
                        state.advance(smp.action, o.observation);
                        sess.state = Some(state);
                        if o.done {
                            let status = if o.truncated { RolloutStatus::Truncated } else { RolloutStatus::Complete };
                            self.finish(s, status, o.reward.unwrap_or(0), o.true_reward, None);
                            self.release(w);
                            out.extend(self.start());
                        } else if sess.steps.len() >= self.plan.step_cap {
                            // worker disagrees with the plan's cap: stop here
                            self.finish(s, RolloutStatus::Truncated, 0, Some(0), None);
                            out.push((w, Cmd::Restart));
                            self.on_worker[w] = None;
                        } else {
                            self.queue.push_back((s, now));
                        }
                    }
                    Err(f) => out.extend(self.fail(w, s, f)),
                }
            }
        }
        out
    }

    fn fail(&mut self, w: usize, s: usize, f: EnvFailure) -> Vec<(usize, Cmd)> {
        self.last_failure = Some(f.clone());
        self.finish(s, RolloutStatus::Failed, 0, None, Some(f));
        self.on_worker[w] = None;
        vec![(w, Cmd::Restart)]
    }

    /// Time at which the async linger expires, if a request is waiting.
    pub(crate) fn deadline(&self) -> Option<f64> {
        match (self.plan.mode, self.queue.front()) {
            (CollectMode::Async, Some((_, t))) => Some(t + self.plan.linger_ms),
            _ => None,
        }
    }

    pub(crate) fn has_queued(&self) -> bool {
        !self.queue.is_empty()
    }

    pub(crate) fn ready(&self, now: f64) -> bool {
        let Some((_, oldest)) = self.queue.front() else { return false };
        match self.plan.mode {
            CollectMode::Sequential => true,
            CollectMode::SyncBarrier => self.in_flight == 0,
            CollectMode::Async => {
                self.in_flight == 0 || self.queue.len() >= self.plan.inference_batch_max || now - oldest >= self.plan.linger_ms
            }
        }
    }

    pub(crate) fn take_batch(&mut self) -> Vec<usize> {
        let n = match self.plan.mode {
            CollectMode::SyncBarrier => self.queue.len(),
            _ => self.queue.len().min(self.plan.inference_batch_max),
        };
        self.batches += 1;
        self.queue.drain(..n).map(|(s, _)| s).collect()
    }

    /// Samples the next action of every session in `batch`.
    pub(crate) fn infer(&mut self, batch: &[usize]) -> Vec<(usize, Cmd)> {
        let mut out = Vec::with_capacity(batch.len());
        for &s in batch {
            let sess = &mut self.sessions[s];
            let state = sess.state.as_ref().expect("queued sessions hold a state");
            let smp = match self.plan.decode {
                Decode::Greedy => self.policy.greedy_action(state, self.plan.mask),
                Decode::Sampled(t) => self.policy.sample_action(state, t, &mut sess.rng, self.plan.mask),
            };
            let w = sess.worker.expect("queued sessions hold a worker");
            sess.pending = Some(smp.clone());
            self.in_flight += 1;
            out.push((w, Cmd::Step { action: smp.action }));
        }
        out
    }

    pub(crate) fn into_records(self) -> Vec<RolloutRecord> {
        let version = self.policy.version;
        self.sessions
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let (status, reward, true_reward, failure) =
                    s.outcome.unwrap_or((RolloutStatus::Failed, 0, None, Some(EnvFailure::Protocol("never scheduled".into()))));
                let session_id = i as u64 + 1;
                RolloutRecord {
                    group: s.group,
                    slot: s.slot,
                    session_id,
                    worker: s.worker.unwrap_or(usize::MAX),
                    status,
                    watermarks: s.watermarks,
                    trajectory: Trajectory {
                        context: s.ctx,
                        steps: s.steps,
                        terminal_reward: reward,
                        truncated: status == RolloutStatus::Truncated,
                        wall_times: s.wall_times,
                        true_reward,
                    },
                    states: s.states,
                    policy_version: version,
                    failure,
                }
            })
            .collect()
    }
}
