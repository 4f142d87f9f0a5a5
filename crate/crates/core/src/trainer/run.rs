//! The training loop and few-shot adaptation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::GroupBatch;
use super::curriculum::{CurriculumSchedule, CurriculumState};
use super::grpo::grpo_loss_and_grad;
use super::optim::{adam_update, AdamState};
use super::ppo::{ppo_loss_and_grad, ppo_targets, ValueHead};
use super::{Algo, TrainConfig, TrainError};
use crate::cmdp::Context;
use crate::hashing;
use crate::policy::PolicyParams;
use crate::rollout::{collect, CollectOutput, Decode, RolloutPlan, WorkerPool};
use crate::scalar::Scalar;
use crate::sim::ClockMode;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: usize,
    pub contexts: Vec<String>,
    /// Mean training reward (rule script or judge).
    pub train_reward: f64,
    /// Mean rule-script reward of the same rollouts.
    pub true_success: f64,
    pub reward_gap: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub lr: f64,
    pub rollouts: usize,
    pub failed: usize,
    pub env_steps: usize,
    pub collect_wall_ms: f64,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<F> {
    pub step: u64,
    pub params: PolicyParams<F>,
}

#[derive(Clone, Debug)]
pub struct TrainRun<F> {
    pub final_params: PolicyParams<F>,
    pub checkpoints: Vec<Checkpoint<F>>,
    pub metrics: Vec<StepMetrics>,
}

pub fn save_params<F: Scalar>(path: &Path, params: &PolicyParams<F>) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(params)?)?;
    Ok(())
}

pub fn load_params<F: Scalar>(path: &Path) -> Result<PolicyParams<F>, TrainError> {
    let p: PolicyParams<F> = serde_json::from_slice(&fs::read(path)?)?;
    if p.theta.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::Numerics(format!("{} holds non-finite parameters", path.display())));
    }
    let expected = PolicyParams::<F>::init(p.config.clone()).n_params();
    if p.theta.len() != expected {
        return Err(TrainError::Config(format!("{}: {} parameters, config implies {expected}", path.display(), p.theta.len())));
    }
    Ok(p)
}

fn stage_contexts<'a>(contexts: &'a [Context], schedule: &CurriculumSchedule, stage: usize) -> Vec<&'a Context> {
    let allowed = &schedule.stages[stage].difficulties;
    let pool: Vec<&Context> = contexts.iter().filter(|c| allowed.contains(&c.difficulty)).collect();
    if pool.is_empty() {
        contexts.iter().collect()
    } else {
        pool
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

struct Persist<'a> {
    dir: &'a Path,
    log: fs::File,
}

impl Persist<'_> {
    fn checkpoint<F: Scalar>(&self, step: u64, params: &PolicyParams<F>, opt: &AdamState<F>) -> Result<(), TrainError> {
        let d = self.dir.join("checkpoints").join(step.to_string());
        save_params(&d.join("params.json"), params)?;
        fs::write(d.join("optimizer.json"), serde_json::to_vec(opt)?)?;
        Ok(())
    }
}

/// Trains from `init` on `contexts`. Evaluation never happens here.
/// With `out_dir`, writes `metrics.jsonl` and `checkpoints/{step}/`.
pub fn train<F: Scalar>(
    init: &PolicyParams<F>,
    contexts: &[Context],
    cfg: &TrainConfig,
    pool: &WorkerPool,
    clock: ClockMode,
    out_dir: Option<&Path>,
) -> Result<TrainRun<F>, TrainError> {
    cfg.validate()?;
    if contexts.is_empty() {
        return Err(TrainError::Config("no training contexts".into()));
    }
    let schedule = cfg.schedule();
    let reference = init.clone();
    let mut params = init.clone();
    let mut opt = AdamState::new(params.n_params());
    let mut value = ValueHead::<F>::zeros(&params.config.features);
    let mut vopt = AdamState::new(value.theta.len());
    let mut curriculum = CurriculumState::new();
    let mut persist = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(Persist { dir: d, log: fs::File::create(d.join("metrics.jsonl"))? })
        }
        None => None,
    };
    let mut checkpoints = vec![Checkpoint { step: 0, params: params.clone() }];
    if let Some(p) = &persist {
        p.checkpoint(0, &params, &opt)?;
    }
    let mut metrics = Vec::new();
    let mut last_success = None;

    for step in 0..cfg.total_steps {
        let stage = curriculum.advance(&schedule, step, last_success);
        let candidates = stage_contexts(contexts, &schedule, stage);
        let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine(&[cfg.seed, step, 0x5e1ec7]));
        let k = cfg.contexts_per_step.min(candidates.len());
        let chosen: Vec<Context> = sample(&mut rng, candidates.len(), k).into_iter().map(|i| candidates[i].clone()).collect();

        let mut plan = RolloutPlan::new(
            chosen.iter().map(|c| (c.clone(), cfg.group_size)).collect(),
            cfg.collect_mode,
            hashing::combine(&[cfg.seed, step, 0xc011ec7]),
        );
        plan.step_cap = cfg.step_cap;
        plan.decode = Decode::Sampled(cfg.temperature);
        plan.inference_batch_max = cfg.inference_batch_max;
        plan.linger_ms = cfg.linger_ms;
        plan.history_window = cfg.history_window;
        let out: CollectOutput = match collect(&plan, pool, &params, clock) {
            Ok(o) => o,
            Err(_) => match collect(&plan, pool, &params, clock) {
                Ok(o) => o,
                Err(e) => {
                    if let Some(p) = &persist {
                        p.checkpoint(step, &params, &opt)?;
                    }
                    return Err(e.into());
                }
            },
        };

        let batch = GroupBatch::from_records(&chosen, &out.records, params.version);
        let old = params.clone();
        let mut loss = 0.0;
        let mut diag = super::Diagnostics::default();
        let mut lr = 0.0;
        if !batch.groups.is_empty() {
            match cfg.algo {
                Algo::Grpo => {
                    for u in 0..cfg.updates_per_step {
                        let r = grpo_loss_and_grad(&batch, &params, &old, &reference, &cfg.grpo)?;
                        if u == 0 {
                            debug_assert_eq!(r.diag.clip_fraction, 0.0);
                            loss = r.loss.as_f64();
                            diag = r.diag;
                        }
                        lr = adam_update(&mut params.theta, &r.grad, &mut opt, step + 1, &cfg.adam)?;
                    }
                }
                Algo::Ppo => {
                    let targets = ppo_targets(&batch, &old, &value, &cfg.ppo);
                    for u in 0..cfg.updates_per_step {
                        let r = ppo_loss_and_grad(&batch, &targets, &params, &old, &value, &cfg.ppo)?;
                        if u == 0 {
                            loss = r.loss.as_f64();
                            diag = r.diag;
                        }
                        lr = adam_update(&mut params.theta, &r.policy_grad, &mut opt, step + 1, &cfg.adam)?;
                        adam_update(&mut value.theta, &r.value_grad, &mut vopt, step + 1, &cfg.adam)?;
                    }
                }
            }
            params.version += 1;
        }

        let ok: Vec<_> = batch.members().collect();
        let train_reward = mean(ok.iter().map(|m| m.reward));
        let true_success = mean(ok.iter().map(|m| m.true_reward));
        last_success = Some(true_success);
        let m = StepMetrics {
            step,
            stage,
            contexts: chosen.iter().map(|c| format!("{}#{}", c.template_id, c.instance_seed)).collect(),
            train_reward,
            true_success,
            reward_gap: train_reward - true_success,
            loss,
            clip_fraction: diag.clip_fraction,
            mean_kl: diag.mean_kl,
            mean_ratio: diag.mean_ratio,
            lr,
            rollouts: out.records.len(),
            failed: out.failed(),
            env_steps: out.report.steps,
            collect_wall_ms: out.report.wall_ms,
            version: params.version,
        };
        if let Some(p) = &mut persist {
            serde_json::to_writer(&mut p.log, &m)?;
            p.log.write_all(b"\n")?;
        }
        metrics.push(m);

        let done = step + 1;
        if cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == cfg.total_steps) {
            if let Some(p) = &persist {
                p.checkpoint(done, &params, &opt)?;
            }
            checkpoints.push(Checkpoint { step: done, params: params.clone() });
        }
    }
    Ok(TrainRun { final_params: params, checkpoints, metrics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptStrategy {
    AllApp,
    PerApp,
}

impl std::str::FromStr for AdaptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all-app" => Ok(AdaptStrategy::AllApp),
            "per-app" => Ok(AdaptStrategy::PerApp),
            _ => Err(format!("unknown strategy `{s}` (all-app, per-app)")),
        }
    }
}

/// Adapted policies and how test contexts reach them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Adapted<F> {
    Single(PolicyParams<F>),
    PerApp(BTreeMap<String, PolicyParams<F>>),
}

impl<F: Scalar> Adapted<F> {
    pub fn route(&self, app: &str) -> Result<&PolicyParams<F>, TrainError> {
        match self {
            Adapted::Single(p) => Ok(p),
            Adapted::PerApp(m) => m.get(app).ok_or_else(|| TrainError::Routing(app.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Adapted::Single(_) => 1,
            Adapted::PerApp(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `steps` more training steps on the adaptation set, pooled or per app.
/// The curriculum is flat and the warmup is capped at `steps`.
pub fn adapt_few_shot<F: Scalar>(
    checkpoint: &PolicyParams<F>,
    adaptation: &[Context],
    strategy: AdaptStrategy,
    steps: u64,
    cfg: &TrainConfig,
    pool: &WorkerPool,
    clock: ClockMode,
) -> Result<Adapted<F>, TrainError> {
    let mut c = cfg.clone();
    c.total_steps = steps;
    c.curriculum = Some(CurriculumSchedule::flat());
    c.adam.warmup_steps = c.adam.warmup_steps.min(steps);
    c.checkpoint_every = 0;
    let run = |ctxs: &[Context]| -> Result<PolicyParams<F>, TrainError> {
        if steps == 0 {
            return Ok(checkpoint.clone());
        }
        Ok(train(checkpoint, ctxs, &c, pool, clock, None)?.final_params)
    };
    match strategy {
        AdaptStrategy::AllApp => Ok(Adapted::Single(run(adaptation)?)),
        AdaptStrategy::PerApp => {
            let mut by_app: BTreeMap<String, Vec<Context>> = BTreeMap::new();
            for ctx in adaptation {
                by_app.entry(ctx.app_id.clone()).or_default().push(ctx.clone());
            }
            let mut out = BTreeMap::new();
            for (app, ctxs) in by_app {
                out.insert(app, run(&ctxs)?);
            }
            Ok(Adapted::PerApp(out))
        }
    }
}
