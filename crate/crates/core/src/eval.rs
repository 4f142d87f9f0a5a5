//! Zero-shot evaluation on held-out contexts, regime comparison and the
//! reward-source experiment.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{verify_split, Regime, SplitSpec};
use crate::cmdp::{Context, Difficulty, RolloutStatus, TaskType, DEFAULT_HISTORY_WINDOW, DEFAULT_STEP_CAP};
use crate::policy::PolicyParams;
use crate::rollout::{collect, CollectError, CollectMode, Decode, RolloutPlan, WorkerPool};
use crate::scalar::Scalar;
use crate::sim::{ClockMode, EnvConfig, JudgeConfig, Suite};
use crate::trainer::{train, Adapted, StepMetrics, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split failed verification: {0}")]
    Leak(String),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub decode: Decode,
    /// Episode seed shared by every evaluated context.
    pub seed: u64,
    pub step_cap: usize,
    pub mode: CollectMode,
    pub history_window: usize,
    /// Re-runs allowed for a context whose environment failed.
    pub retries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decode: Decode::Greedy,
            seed: 0,
            step_cap: DEFAULT_STEP_CAP,
            mode: CollectMode::Async,
            history_window: DEFAULT_HISTORY_WINDOW,
            retries: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextOutcome {
    pub app_id: String,
    pub template_id: String,
    pub instance_seed: u64,
    pub difficulty: Difficulty,
    pub task_type: TaskType,
    pub success: bool,
    pub steps: usize,
    pub env_failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub difficulty: Difficulty,
    pub task_type: TaskType,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub regime: Option<Regime>,
    pub decode: Decode,
    pub outcomes: Vec<ContextOutcome>,
    /// Percent, mean of per-template means.
    pub success_mean: f64,
    /// Percent, population std over eval-seed runs.
    pub success_std: f64,
    pub per_template: BTreeMap<String, f64>,
    pub breakdown: Vec<BreakdownCell>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("app_id,template_id,instance_seed,difficulty,task_type,success,steps,env_failed\n");
        for o in &self.outcomes {
            s.push_str(&format!(
                "{},{},{},{},{:?},{},{},{}\n",
                o.app_id,
                o.template_id,
                o.instance_seed,
                o.difficulty.level(),
                o.task_type,
                u8::from(o.success),
                o.steps,
                o.env_failed
            ));
        }
        s
    }
}

/// Aggregates outcomes: per-template means, their mean, and the spread over
/// seed runs (run j holds each template's j-th seed, seeds in ascending order).
pub fn summarize(outcomes: &[ContextOutcome]) -> (f64, f64, BTreeMap<String, f64>) {
    let mut by_template: BTreeMap<String, Vec<(u64, bool)>> = BTreeMap::new();
    for o in outcomes {
        by_template.entry(o.template_id.clone()).or_default().push((o.instance_seed, o.success));
    }
    let mut per_template = BTreeMap::new();
    let mut runs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (t, v) in by_template.iter_mut() {
        v.sort();
        let m = v.iter().filter(|(_, s)| *s).count() as f64 / v.len() as f64 * 100.0;
        per_template.insert(t.clone(), m);
        for (j, (_, s)) in v.iter().enumerate() {
            runs.entry(j).or_default().push(if *s { 100.0 } else { 0.0 });
        }
    }
    if per_template.is_empty() {
        return (0.0, 0.0, per_template);
    }
    let mean = per_template.values().sum::<f64>() / per_template.len() as f64;
    let run_means: Vec<f64> = runs.values().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let rm = run_means.iter().sum::<f64>() / run_means.len() as f64;
    let var = run_means.iter().map(|x| (x - rm) * (x - rm)).sum::<f64>() / run_means.len() as f64;
    (mean, var.sqrt(), per_template)
}

fn breakdown(outcomes: &[ContextOutcome]) -> Vec<BreakdownCell> {
    let mut cells = Vec::new();
    for d in Difficulty::ALL {
        for t in [TaskType::TaskCompletion, TaskType::InformationRetrieval] {
            let xs: Vec<_> = outcomes.iter().filter(|o| o.difficulty == d && o.task_type == t).collect();
            let successes = xs.iter().filter(|o| o.success).count();
            cells.push(BreakdownCell {
                difficulty: d,
                task_type: t,
                n: xs.len(),
                successes,
                rate: if xs.is_empty() { 0.0 } else { successes as f64 / xs.len() as f64 * 100.0 },
            });
        }
    }
    cells
}

fn run_contexts<F: Scalar>(
    contexts: &[Context],
    policy: &PolicyParams<F>,
    pool: &WorkerPool,
    cfg: &EvalConfig,
    clock: ClockMode,
) -> Result<Vec<ContextOutcome>, EvalError> {
    let mut plan = RolloutPlan::new(contexts.iter().map(|c| (c.clone(), 1)).collect(), cfg.mode, cfg.seed);
    plan.decode = cfg.decode;
    plan.step_cap = cfg.step_cap;
    plan.history_window = cfg.history_window;
    let mut out = collect(&plan, pool, policy, clock)?;
    let mut tries = 0;
    while tries < cfg.retries && out.records.iter().any(|r| r.status == RolloutStatus::Failed) {
        tries += 1;
        let failed: Vec<usize> = out.records.iter().enumerate().filter(|(_, r)| r.status == RolloutStatus::Failed).map(|(i, _)| i).collect();
        let mut again = plan.clone();
        again.batch = failed.iter().map(|i| plan.batch[*i].clone()).collect();
        let redo = collect(&again, pool, policy, clock)?;
        for (i, mut r) in failed.into_iter().zip(redo.records) {
            r.group = out.records[i].group;
            out.records[i] = r;
        }
    }
    Ok(out
        .records
        .iter()
        .zip(contexts)
        .map(|(r, c)| ContextOutcome {
            app_id: c.app_id.clone(),
            template_id: c.template_id.clone(),
            instance_seed: c.instance_seed,
            difficulty: c.difficulty,
            task_type: c.task_type,
            success: r.status != RolloutStatus::Failed && r.trajectory.rule_reward() == 1,
            steps: r.trajectory.steps.len(),
            env_failed: r.status == RolloutStatus::Failed,
        })
        .collect())
}

/// Runs every context once; each context goes to its app's policy.
pub fn evaluate<F: Scalar>(
    checkpoint_id: &str,
    policies: &Adapted<F>,
    contexts: &[Context],
    pool: &WorkerPool,
    cfg: &EvalConfig,
    clock: ClockMode,
) -> Result<EvalReport, EvalError> {
    let outcomes = match policies {
        Adapted::Single(p) => run_contexts(contexts, p, pool, cfg, clock)?,
        Adapted::PerApp(_) => {
            let mut by_app: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, c) in contexts.iter().enumerate() {
                by_app.entry(c.app_id.as_str()).or_default().push(i);
            }
            let mut slots: Vec<Option<ContextOutcome>> = vec![None; contexts.len()];
            for (app, idx) in by_app {
                let p = policies.route(app)?;
                let ctxs: Vec<Context> = idx.iter().map(|i| contexts[*i].clone()).collect();
                for (i, o) in idx.into_iter().zip(run_contexts(&ctxs, p, pool, cfg, clock)?) {
                    slots[i] = Some(o);
                }
            }
            slots.into_iter().map(|o| o.expect("every context routed")).collect()
        }
    };
    let (success_mean, success_std, per_template) = summarize(&outcomes);
    Ok(EvalReport {
        checkpoint_id: checkpoint_id.to_string(),
        regime: None,
        decode: cfg.decode,
        breakdown: breakdown(&outcomes),
        outcomes,
        success_mean,
        success_std,
        per_template,
    })
}

/// `evaluate` on a split's test side after re-verifying the split.
pub fn evaluate_split<F: Scalar>(
    checkpoint_id: &str,
    policies: &Adapted<F>,
    split: &SplitSpec,
    pool: &WorkerPool,
    cfg: &EvalConfig,
    clock: ClockMode,
) -> Result<EvalReport, EvalError> {
    let v = verify_split(split);
    if !v.is_clean() {
        return Err(EvalError::Leak(format!("{:?}", v.violations)));
    }
    let mut r = evaluate(checkpoint_id, policies, &split.test, pool, cfg, clock)?;
    r.regime = Some(split.regime);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: Regime,
    pub initial: f64,
    pub final_: f64,
    pub delta: f64,
    pub max: f64,
    /// First step whose success is within one point of the max.
    pub plateau_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeTable {
    /// One entry per regime in canonical order; None when absent.
    pub rows: Vec<(Regime, Option<RegimeRow>)>,
    /// Delta(Instance) >= Delta(Template) >= Delta(App) over present rows.
    pub expected_order_holds: bool,
    pub instance_beats_app: Option<bool>,
}

/// Builds the regime table from (step, success%) curves per regime.
pub fn compare_regimes(curves: &[(Regime, Vec<(u64, f64)>)]) -> RegimeTable {
    let mut rows = Vec::new();
    for r in Regime::ALL {
        let row = curves.iter().find(|(g, c)| *g == r && !c.is_empty()).map(|(_, c)| {
            let mut c = c.clone();
            c.sort_by_key(|(s, _)| *s);
            let initial = c[0].1;
            let final_ = c[c.len() - 1].1;
            let max = c.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
            let plateau_step = c.iter().find(|(_, v)| *v >= max - 1.0).map_or(0, |(s, _)| *s);
            RegimeRow { regime: r, initial, final_, delta: final_ - initial, max, plateau_step }
        });
        rows.push((r, row));
    }
    let deltas: Vec<f64> = rows.iter().filter_map(|(_, r)| r.as_ref().map(|r| r.delta)).collect();
    let expected_order_holds = deltas.windows(2).all(|w| w[0] >= w[1]);
    let d = |g: Regime| rows.iter().find(|(r, _)| *r == g).and_then(|(_, r)| r.as_ref().map(|r| r.delta));
    let instance_beats_app = match (d(Regime::UnseenInstance), d(Regime::UnseenApp)) {
        (Some(a), Some(b)) => Some(a > b),
        _ => None,
    };
    RegimeTable { rows, expected_order_holds, instance_beats_app }
}

impl RegimeTable {
    pub fn format(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "regime", "initial", "final", "delta", "max", "plateau");
        for (r, row) in &self.rows {
            match row {
                Some(x) => s.push_str(&format!(
                    "{:<16} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8}\n",
                    r.label(),
                    x.initial,
                    x.final_,
                    x.delta,
                    x.max,
                    x.plateau_step
                )),
                None => s.push_str(&format!("{:<16} {:>8}\n", r.label(), "absent")),
            }
        }
        s.push_str(&format!("ordering Instance >= Template >= App: {}\n", if self.expected_order_holds { "pass" } else { "fail" }));
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSourceArm {
    pub label: String,
    pub metrics: Vec<StepMetrics>,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub improvement: f64,
    /// Mean of (training reward - true reward) over steps.
    pub mean_reward_gap: f64,
    /// Mean over steps of this arm's false-positive rate times the failure
    /// mass of the true outcomes.
    pub expected_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSourceResult {
    pub fp_rate: f64,
    pub rule: RewardSourceArm,
    pub noisy: RewardSourceArm,
}

/// Two trainings that differ only in the training-reward source, both
/// evaluated with the rule script.
#[allow(clippy::too_many_arguments)]
pub fn reward_source_experiment<F: Scalar>(
    suite: Arc<Suite>,
    init: &PolicyParams<F>,
    train_contexts: &[Context],
    test_contexts: &[Context],
    train_cfg: &TrainConfig,
    env: &EnvConfig,
    workers: usize,
    fp_rate: f64,
    judge_seed: u64,
    eval_cfg: &EvalConfig,
    clock: ClockMode,
) -> Result<RewardSourceResult, EvalError> {
    let eval_pool = WorkerPool::local(workers, suite.clone(), env);
    let initial = evaluate("initial", &Adapted::Single(init.clone()), test_contexts, &eval_pool, eval_cfg, clock)?.success_mean;
    let arm = |label: &str, judge: Option<JudgeConfig>, fp: f64| -> Result<RewardSourceArm, EvalError> {
        let mut e = env.clone();
        e.judge = judge;
        let pool = WorkerPool::local(workers, suite.clone(), &e);
        let run = train(init, train_contexts, train_cfg, &pool, clock, None)?;
        let fin = evaluate(label, &Adapted::Single(run.final_params.clone()), test_contexts, &eval_pool, eval_cfg, clock)?.success_mean;
        let n = run.metrics.len().max(1) as f64;
        Ok(RewardSourceArm {
            label: label.to_string(),
            initial_eval: initial,
            final_eval: fin,
            improvement: fin - initial,
            mean_reward_gap: run.metrics.iter().map(|m| m.reward_gap).sum::<f64>() / n,
            expected_gap: run.metrics.iter().map(|m| fp * (1.0 - m.true_success)).sum::<f64>() / n,
            metrics: run.metrics,
        })
    };
    let rule = arm("rule", None, 0.0)?;
    let noisy = if fp_rate == 0.0 {
        let mut n = rule.clone();
        n.label = "noisy-judge".into();
        n
    } else {
        arm("noisy-judge", Some(JudgeConfig { fp_rate, fn_rate: 0.0, seed: judge_seed }), fp_rate)?
    };
    Ok(RewardSourceResult { fp_rate, rule, noisy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(t: &str, seed: u64, s: bool) -> ContextOutcome {
        ContextOutcome {
            app_id: "A".into(),
            template_id: t.into(),
            instance_seed: seed,
            difficulty: Difficulty::Easy,
            task_type: TaskType::TaskCompletion,
            success: s,
            steps: 3,
            env_failed: false,
        }
    }

    #[test]
    fn per_template_mean_of_means() {
        let xs = vec![o("a", 1, true), o("a", 2, false), o("a", 3, true), o("b", 1, false), o("b", 2, false), o("b", 3, false)];
        let (m, sd, per) = summarize(&xs);
        assert!((m - (per["a"] + per["b"]) / 2.0).abs() < 1e-12);
        assert!((per["a"] - 200.0 / 3.0).abs() < 1e-9);
        // runs: {a1,b1}=50, {a2,b2}=0, {a3,b3}=50
        let rm = 100.0 / 3.0;
        let expect = (((50.0 - rm) * (50.0 - rm) * 2.0 + rm * rm) / 3.0f64).sqrt();
        assert!((sd - expect).abs() < 1e-9);
    }

    #[test]
    fn identical_seeds_zero_std() {
        let xs = vec![o("a", 1, true), o("a", 2, true), o("b", 1, false), o("b", 2, false)];
        assert_eq!(summarize(&xs).1, 0.0);
    }

    #[test]
    fn regimes() {
        let same = vec![(0, 10.0), (100, 30.0)];
        let t = compare_regimes(&[
            (Regime::UnseenInstance, same.clone()),
            (Regime::UnseenTemplate, same.clone()),
            (Regime::UnseenApp, same),
        ]);
        assert!(t.rows.iter().all(|(_, r)| r.as_ref().unwrap().delta == 20.0));
        assert!(t.expected_order_holds);
        assert_eq!(t.instance_beats_app, Some(false));
        let t = compare_regimes(&[(Regime::UnseenInstance, vec![(0, 0.0), (10, 5.0), (20, 5.5)])]);
        assert!(t.rows[1].1.is_none());
        assert_eq!(t.rows[0].1.as_ref().unwrap().plateau_step, 10);
        assert!(t.format().contains("absent"));
    }
}
