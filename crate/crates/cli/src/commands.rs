use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context as _};
use clap::Args;
use mobirl_core::bench::{format_table, make_adaptation_set, split, verify_split, Regime, SplitSpec, Violation};
use mobirl_core::catalog::TaskCatalog;
use mobirl_core::cmdp::{Action, Context};
use mobirl_core::eval::{compare_regimes, evaluate, evaluate_split, reward_source_experiment, EvalConfig, EvalReport};
use mobirl_core::fixtures::reference_catalog;
use mobirl_core::policy::PolicyConfig;
use mobirl_core::rollout::{profile as run_profile, CollectMode, Decode, EnvWorker, ProfileConfig, ProfileRow};
use mobirl_core::sim::env::resolve_task;
use mobirl_core::sim::solver::solve;
use mobirl_core::sim::{build_default_suite, EnvConfig, FaultModel, LatencyModel, SimEnv, Suite};
use mobirl_core::trainer::{adapt_few_shot, load_params, save_params, train as run_train, warm_start, AdaptStrategy, Adapted, Algo, TrainConfig};
use mobirl_core::Params64;
use mobirl_wire::{spawn_worker_pool, WorkerEndpoint};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::workers::{build_pool, self_launch_spec};
use crate::{Common, Failure};

fn input_error(flag: &str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Config(ConfigError::one(flag, format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path, flag: &str) -> Result<T, Failure> {
    let bytes = fs::read(path).map_err(|e| input_error(flag, path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| input_error(flag, path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, s: &str) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn load_suite(c: &Common, cfg: &RunConfig) -> Result<Arc<Suite>, Failure> {
    match &c.suite {
        Some(p) => Ok(Arc::new(read_json(p, "--suite")?)),
        None => Ok(Arc::new(build_default_suite(&cfg.suite))),
    }
}

fn env_for(cfg: &RunConfig) -> EnvConfig {
    EnvConfig { clock: cfg.clock, ..cfg.env.clone() }
}

fn policy_config(cfg: &RunConfig, suite: &Suite) -> PolicyConfig {
    let mut p = PolicyConfig::new(suite.app_names());
    p.hidden = cfg.policy.hidden;
    p.init_seed = cfg.policy.init_seed;
    p.history_window = cfg.policy.history_window;
    p
}

pub fn slug(r: Regime) -> &'static str {
    match r {
        Regime::UnseenInstance => "unseen-instance",
        Regime::UnseenTemplate => "unseen-template",
        Regime::UnseenApp => "unseen-app",
    }
}

fn split_file(dir: &Path, r: Regime) -> PathBuf {
    dir.join(format!("split-{}.json", slug(r)))
}

/// A split file, or the regime's file inside a `gen-split` directory.
fn load_split(path: &Path, regime: Option<Regime>) -> Result<SplitSpec, Failure> {
    let file = if path.is_dir() {
        let r = regime.ok_or_else(|| input_error("--split", path, "is a directory; pass --regime to pick a split"))?;
        split_file(path, r)
    } else {
        path.to_path_buf()
    };
    let sp: SplitSpec = read_json(&file, "--split")?;
    if let Some(r) = regime {
        if sp.regime != r {
            return Err(input_error("--regime", &file, format!("holds a {} split, not {}", slug(sp.regime), slug(r))));
        }
    }
    Ok(sp)
}

/// Every context must name a task this suite can simulate.
fn check_split_in_suite(sp: &SplitSpec, suite: &Suite) -> Result<(), Failure> {
    for c in sp.train.iter().chain(&sp.test) {
        resolve_task(suite, c).map_err(|e| Failure::Config(ConfigError::one("--split", format!("context {}: {e}", c.instruction))))?;
    }
    Ok(())
}

fn require_clean(sp: &SplitSpec) -> anyhow::Result<()> {
    let v = verify_split(sp);
    if v.is_clean() {
        Ok(())
    } else {
        Err(anyhow!("split failed verification: {}", describe_violations(sp, &v.violations).join("; ")))
    }
}

fn load_policies(path: &Path, flag: &str) -> Result<Adapted<f64>, Failure> {
    let bytes = fs::read(path).map_err(|e| input_error(flag, path, e))?;
    if let Ok(a) = serde_json::from_slice::<Adapted<f64>>(&bytes) {
        return Ok(a);
    }
    load_params::<f64>(path).map(Adapted::Single).map_err(|e| input_error(flag, path, e))
}

fn load_single(path: &Path, flag: &str) -> Result<Params64, Failure> {
    match load_policies(path, flag)? {
        Adapted::Single(p) => Ok(p),
        Adapted::PerApp(_) => Err(input_error(flag, path, "holds per-app policies; a single checkpoint is required")),
    }
}

fn parse_decode(s: &str) -> Result<Decode, Failure> {
    let bad = || Failure::Config(ConfigError::one("--decode", format!("`{s}`: expected greedy, sampled or sampled:T")));
    match s.split_once(':') {
        None if s == "greedy" => Ok(Decode::Greedy),
        None if s == "sampled" => Ok(Decode::Sampled(1.0)),
        Some(("sampled", t)) => match t.parse::<f64>() {
            Ok(t) if t > 0.0 && t.is_finite() => Ok(Decode::Sampled(t)),
            _ => Err(bad()),
        },
        _ => Err(bad()),
    }
}

fn config_err(path: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Config(ConfigError::one(path, e))
}

/// Replays the scripted solution; true when it earns reward 1.
fn solves(suite: &Arc<Suite>, ctx: &Context) -> Result<(Vec<Action>, bool), String> {
    let actions = solve(suite, ctx).map_err(|e| e.to_string())?;
    let mut env = SimEnv::new(suite.clone(), EnvConfig { latency: LatencyModel::zero(), faults: FaultModel::default(), ..EnvConfig::default() });
    env.reset(ctx, 0).map_err(|e| e.to_string())?;
    let mut last = None;
    for a in &actions {
        last = Some(env.step(a).map_err(|e| e.to_string())?);
    }
    Ok((actions, matches!(last, Some(o) if o.done && o.reward == Some(1))))
}

fn describe_violations(sp: &SplitSpec, vs: &[Violation]) -> Vec<String> {
    vs.iter()
        .map(|v| match v {
            Violation::InstructionOverlap { train_index, test_index, instruction } => {
                let t = &sp.train[*train_index];
                let e = &sp.test[*test_index];
                format!(
                    "instance leak: train[{train_index}] ({} {} seed {}) and test[{test_index}] ({} {} seed {}) share \"{instruction}\"",
                    t.app_id, t.template_id, t.instance_seed, e.app_id, e.template_id, e.instance_seed
                )
            }
            other => serde_json::to_string(other).unwrap_or_else(|_| format!("{other:?}")),
        })
        .collect()
}

pub fn gen_suite(c: &Common, cfg: &RunConfig) -> Result<(), Failure> {
    let suite = load_suite(c, cfg)?;
    write_json(&c.out.join("suite.json"), &*suite)?;
    write_json(&c.out.join("catalog.json"), &suite.catalog)?;
    write_json(&c.out.join("env.json"), &env_for(cfg))?;
    let mut lines = String::new();
    let mut unsolved = Vec::new();
    let mut n = 0;
    for (app, t) in suite.catalog.templates() {
        for &seed in &cfg.split.eval_seeds {
            let ctx = Context::new(app, t, seed).map_err(|e| anyhow!("{}: {e}", t.template_id))?;
            let (actions, ok) = solves(&suite, &ctx).map_err(|e| anyhow!("{}: {e}", t.template_id))?;
            if !ok {
                unsolved.push(format!("{} seed {seed}", t.template_id));
            }
            let line = serde_json::json!({
                "app_id": app,
                "template_id": t.template_id,
                "instance_seed": seed,
                "instruction": ctx.instruction,
                "actions": actions,
                "solved": ok,
            });
            let _ = writeln!(lines, "{line}");
            n += 1;
        }
    }
    write_text(&c.out.join("solutions.jsonl"), &lines)?;
    println!("{} apps, {} templates, {n} scripted solutions in {}", suite.apps.len(), suite.catalog.template_count(), c.out.display());
    if unsolved.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("scripted solutions fail on {}", unsolved.join(", ")).into())
    }
}

#[derive(Args, Debug)]
pub struct GenSplitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Task catalog JSON; defaults to the suite's catalog.
    #[arg(long, conflicts_with = "fixture")]
    pub catalog: Option<PathBuf>,
    /// Use the built-in reference catalog (116 templates over 20 apps).
    #[arg(long)]
    pub fixture: bool,
    /// unseen-instance, unseen-template, unseen-app or all.
    #[arg(long, default_value = "all")]
    pub regime: String,
    /// train:test, e.g. 3:1.
    #[arg(long)]
    pub ratio: Option<String>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub eval_seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub train_seeds: Option<Vec<u64>>,
    /// Also emit k adaptation instances per unseen app.
    #[arg(long)]
    pub adaptation_k: Option<usize>,
}

pub fn gen_split(a: &GenSplitArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let catalog: TaskCatalog = if a.fixture {
        reference_catalog()
    } else if let Some(p) = &a.catalog {
        read_json(p, "--catalog")?
    } else {
        load_suite(&a.common, cfg)?.catalog.clone()
    };
    catalog.validate().map_err(|e| config_err("--catalog", e))?;
    let mut sc = cfg.split.clone();
    if let Some(r) = &a.ratio {
        let parsed = r.split_once(':').and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)));
        match parsed {
            Some((x, y)) if x > 0 && y > 0 => sc.ratio = (x, y),
            _ => return Err(config_err("--ratio", format!("`{r}`: expected TRAIN:TEST with positive parts"))),
        }
    }
    if let Some(t) = a.tolerance {
        if !(t >= 0.0) {
            return Err(config_err("--tolerance", "must be non-negative"));
        }
        sc.tolerance = t;
    }
    if let Some(s) = &a.eval_seeds {
        sc.eval_seeds = s.clone();
    }
    if let Some(s) = &a.train_seeds {
        sc.train_seeds = s.clone();
    }
    let regimes: Vec<Regime> = if a.regime == "all" {
        Regime::ALL.to_vec()
    } else {
        vec![a.regime.parse::<Regime>().map_err(|e| config_err("--regime", e))?]
    };
    let mut splits = Vec::new();
    for r in regimes {
        let sp = split(&catalog, r, &sc).map_err(|e| match e {
            mobirl_core::bench::BenchError::SeedOverlap(_) => config_err("--eval-seeds/--train-seeds", e),
            other => Failure::Runtime(anyhow!("{}: {other}", slug(r))),
        })?;
        write_json(&split_file(&a.common.out, r), &sp)?;
        for w in &sp.report.warnings {
            eprintln!("{}: {w}", slug(r));
        }
        splits.push(sp);
    }
    let table = format_table(&splits.iter().collect::<Vec<_>>());
    write_text(&a.common.out.join("table.txt"), &table)?;
    print!("{table}");
    for sp in &splits {
        println!(
            "{}: {} test instances, {} train instances before dedup ({} duplicates removed), difficulty gap {:.3}",
            slug(sp.regime),
            sp.report.test.instances,
            sp.report.pre_dedup_train,
            sp.report.duplicates_removed,
            sp.report.difficulty_gap
        );
    }
    if let Some(k) = a.adaptation_k {
        let app = splits
            .iter()
            .find(|s| s.regime == Regime::UnseenApp)
            .ok_or_else(|| config_err("--adaptation-k", "needs the unseen-app regime"))?;
        let ad = make_adaptation_set(&catalog, app, k, &cfg.adapt.seeds()).map_err(|e| Failure::Runtime(e.into()))?;
        write_json(&a.common.out.join("adaptation-set.json"), &ad)?;
        println!("adaptation set: {k} per app over {} apps", app.test_apps().len());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// A split file or a `gen-split` directory (every split in it).
    #[arg(long)]
    pub split: PathBuf,
    /// Skip the scripted-solver sweep.
    #[arg(long)]
    pub no_sweep: bool,
}

pub fn verify(a: &VerifyArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let files: Vec<PathBuf> = if a.split.is_dir() {
        Regime::ALL.iter().map(|r| split_file(&a.split, *r)).filter(|p| p.exists()).collect()
    } else {
        vec![a.split.clone()]
    };
    if files.is_empty() {
        return Err(input_error("--split", &a.split, "no split files found"));
    }
    let suite = if a.no_sweep { None } else { Some(load_suite(&a.common, cfg)?) };
    let mut results = Vec::new();
    let mut problems = 0;
    for f in &files {
        let sp: SplitSpec = read_json(f, "--split")?;
        let report = verify_split(&sp);
        for line in describe_violations(&sp, &report.violations) {
            println!("{}: {line}", f.display());
        }
        problems += report.violations.len();
        let mut sweep = serde_json::json!(null);
        if let Some(suite) = &suite {
            let all: Vec<&Context> = sp.train.iter().chain(&sp.test).collect();
            let simulated = all.iter().filter(|c| resolve_task(suite, c).is_ok()).count();
            if simulated == 0 {
                println!("{}: solver sweep skipped, no context belongs to the simulated suite", f.display());
                sweep = serde_json::json!({ "skipped": true });
            } else {
                let mut failed = Vec::new();
                for c in &all {
                    match solves(suite, c) {
                        Ok((_, true)) => {}
                        Ok((_, false)) => failed.push(format!("{} seed {}: scripted solution earns no reward", c.template_id, c.instance_seed)),
                        Err(e) => failed.push(format!("{} seed {}: {e}", c.template_id, c.instance_seed)),
                    }
                }
                for x in &failed {
                    println!("{}: unsolvable {x}", f.display());
                }
                problems += failed.len();
                sweep = serde_json::json!({ "skipped": false, "checked": all.len(), "failed": failed });
            }
        }
        println!("{}: {} violations", f.display(), report.violations.len());
        results.push(serde_json::json!({ "split": f, "regime": sp.regime, "violations": report.violations, "sweep": sweep }));
    }
    write_json(&a.common.out.join("verify.json"), &results)?;
    if problems == 0 {
        Ok(())
    } else {
        Err(anyhow!("{problems} problems found").into())
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Split file (or a `gen-split` directory with --regime).
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub regime: Option<Regime>,
    /// grpo or ppo.
    #[arg(long)]
    pub mode: Option<Algo>,
    /// Initial checkpoint; a behavior-cloned warm start when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

fn initial_params(init: Option<&PathBuf>, cfg: &RunConfig, suite: &Arc<Suite>, train: &[Context], out: &Path) -> Result<Params64, Failure> {
    match init {
        Some(p) => load_single(p, "--init"),
        None => {
            let (p, losses) = warm_start::<f64>(policy_config(cfg, suite), suite, train, &cfg.warm_start).map_err(|e| Failure::Runtime(e.into()))?;
            write_json(&out.join("warm_start.json"), &serde_json::json!({ "config": cfg.warm_start, "losses": losses }))?;
            Ok(p)
        }
    }
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let out = &a.common.out;
    let suite = load_suite(&a.common, cfg)?;
    let sp = load_split(&a.split, a.regime)?;
    check_split_in_suite(&sp, &suite)?;
    let mut tc: TrainConfig = cfg.train.clone();
    if let Some(m) = a.mode {
        tc.algo = m;
    }
    if let Some(s) = a.steps {
        tc.total_steps = s;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(t) = a.temperature {
        tc.temperature = t;
    }
    tc.validate().map_err(|e| config_err("train", e))?;
    let init = initial_params(a.init.as_ref(), cfg, &suite, &sp.train, out)?;
    let pool = build_pool(cfg, &suite, &env_for(cfg), out)?;
    let t0 = Instant::now();
    let run = run_train(&init, &sp.train, &tc, &pool, cfg.clock, Some(out))
        .map_err(|e| anyhow!("training stopped: {e}; metrics and the last checkpoint are in {}", out.display()))?;
    save_params(&out.join("final").join("params.json"), &run.final_params).map_err(anyhow::Error::from)?;
    let last = run.metrics.last();
    let summary = serde_json::json!({
        "regime": sp.regime,
        "algo": tc.algo,
        "steps": tc.total_steps,
        "final_version": run.final_params.version,
        "final_train_reward": last.map(|m| m.train_reward),
        "failed_rollouts": run.metrics.iter().map(|m| m.failed).sum::<usize>(),
        "checkpoints": run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "trained {} steps of {} on {} ({} contexts) in {:.1}s",
        tc.total_steps,
        tc.algo,
        slug(sp.regime),
        sp.train.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Policy file: checkpoint params or adapted policies.
    #[arg(long, conflicts_with = "checkpoint_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of numbered checkpoints; writes a success-vs-step curve.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// greedy, sampled or sampled:T.
    #[arg(long)]
    pub decode: Option<String>,
    /// Compare regime curves instead: REGIME=CURVE_CSV, repeatable.
    #[arg(long = "curve", value_name = "REGIME=CSV")]
    pub curves: Vec<String>,
    /// Train twice from the same start, rule reward vs a noisy judge.
    #[arg(long)]
    pub reward_source: bool,
    #[arg(long)]
    pub fp_rate: Option<f64>,
    /// Starting checkpoint for --reward-source.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

fn eval_config(a: &EvalArgs, cfg: &RunConfig) -> Result<EvalConfig, Failure> {
    let mut e = cfg.eval.clone();
    if let Some(d) = &a.decode {
        e.decode = parse_decode(d)?;
    }
    Ok(e)
}

fn write_report(dir: &Path, name: &str, r: &EvalReport) -> anyhow::Result<()> {
    write_json(&dir.join(format!("{name}.json")), r)?;
    write_text(&dir.join(format!("{name}.csv")), &r.csv())
}

fn read_curve(path: &Path) -> Result<Vec<(u64, f64)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| input_error("--curve", path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut f = line.split(',');
        let parsed = (|| Some((f.next()?.trim().parse().ok()?, f.next()?.trim().parse().ok()?)))();
        out.push(parsed.ok_or_else(|| input_error("--curve", path, format!("line {}: expected step,success_mean", i + 1)))?);
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let out = &a.common.out;
    if !a.curves.is_empty() {
        let mut curves = Vec::new();
        for c in &a.curves {
            let (r, p) = c.split_once('=').ok_or_else(|| config_err("--curve", format!("`{c}`: expected REGIME=CSV")))?;
            let r: Regime = r.parse().map_err(|e| config_err("--curve", e))?;
            curves.push((r, read_curve(Path::new(p))?));
        }
        let table = compare_regimes(&curves);
        write_json(&out.join("regimes.json"), &table)?;
        write_text(&out.join("regimes.txt"), &table.format())?;
        print!("{}", table.format());
        return Ok(());
    }
    let split_path = a.split.as_ref().ok_or_else(|| config_err("--split", "required"))?;
    let sp = load_split(split_path, a.regime)?;
    let suite = load_suite(&a.common, cfg)?;
    check_split_in_suite(&sp, &suite)?;
    let ecfg = eval_config(a, cfg)?;
    let env = env_for(cfg);

    if a.reward_source {
        require_clean(&sp)?;
        let fp = a.fp_rate.unwrap_or(cfg.reward_source.fp_rate);
        if !(0.0..=1.0).contains(&fp) {
            return Err(config_err("--fp-rate", "must lie in [0, 1]"));
        }
        let init = initial_params(a.init.as_ref(), cfg, &suite, &sp.train, out)?;
        let r = reward_source_experiment(
            suite.clone(),
            &init,
            &sp.train,
            &sp.test,
            &cfg.train,
            &env,
            cfg.workers.count,
            fp,
            cfg.reward_source.judge_seed,
            &ecfg,
            cfg.clock,
        )
        .map_err(anyhow::Error::from)?;
        for arm in [&r.rule, &r.noisy] {
            let mut log = String::new();
            for m in &arm.metrics {
                let _ = writeln!(log, "{}", serde_json::to_string(m).map_err(anyhow::Error::from)?);
            }
            write_text(&out.join(&arm.label).join("metrics.jsonl"), &log)?;
            println!(
                "{:<6} initial {:.1} final {:.1} improvement {:+.1} reward gap {:.4} (fp x failure mass {:.4})",
                arm.label, arm.initial_eval, arm.final_eval, arm.improvement, arm.mean_reward_gap, arm.expected_gap
            );
        }
        write_json(&out.join("reward_source.json"), &r)?;
        return Ok(());
    }

    let pool = build_pool(cfg, &suite, &env, out)?;
    match (&a.checkpoint, &a.checkpoint_dir) {
        (Some(p), None) => {
            let policies = load_policies(p, "--checkpoint")?;
            let r = evaluate_split(&p.display().to_string(), &policies, &sp, &pool, &ecfg, cfg.clock).map_err(anyhow::Error::from)?;
            write_report(out, "report", &r)?;
            println!("{}: {:.1} ± {:.1} over {} contexts", slug(sp.regime), r.success_mean, r.success_std, r.outcomes.len());
            Ok(())
        }
        (None, Some(dir)) => {
            let mut steps: Vec<(u64, PathBuf)> = fs::read_dir(dir)
                .map_err(|e| input_error("--checkpoint-dir", dir, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| Some((e.file_name().to_str()?.parse::<u64>().ok()?, e.path().join("params.json"))))
                .filter(|(_, p)| p.exists())
                .collect();
            steps.sort();
            if steps.is_empty() {
                return Err(input_error("--checkpoint-dir", dir, "no numbered checkpoints"));
            }
            let mut curve = String::from("step,success_mean,success_std\n");
            for (step, p) in &steps {
                let params = load_single(p, "--checkpoint-dir")?;
                let r = evaluate_split(&format!("step-{step}"), &Adapted::Single(params), &sp, &pool, &ecfg, cfg.clock)
                    .map_err(anyhow::Error::from)?;
                write_report(&out.join("reports"), &format!("step-{step}"), &r)?;
                let _ = writeln!(curve, "{step},{:.4},{:.4}", r.success_mean, r.success_std);
                eprintln!("step {step}: {:.1} ± {:.1}", r.success_mean, r.success_std);
            }
            write_text(&out.join("curve.csv"), &curve)?;
            print!("{curve}");
            Ok(())
        }
        _ => Err(config_err("--checkpoint", "pass exactly one of --checkpoint, --checkpoint-dir, --curve or --reward-source")),
    }
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Unseen-app split file (or a `gen-split` directory).
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// all-app, per-app or both.
    #[arg(long, default_value = "both")]
    pub strategy: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
}

pub fn adapt(a: &AdaptArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let out = &a.common.out;
    let sp = load_split(&a.split, if a.split.is_dir() { Some(Regime::UnseenApp) } else { None })?;
    if sp.regime != Regime::UnseenApp {
        return Err(config_err("--split", format!("adaptation needs an unseen-app split, got {}", slug(sp.regime))));
    }
    let suite = load_suite(&a.common, cfg)?;
    check_split_in_suite(&sp, &suite)?;
    require_clean(&sp)?;
    let strategies: Vec<AdaptStrategy> = match a.strategy.as_str() {
        "both" => vec![AdaptStrategy::AllApp, AdaptStrategy::PerApp],
        s => vec![s.parse().map_err(|e| config_err("--strategy", e))?],
    };
    let k = a.k.unwrap_or(cfg.adapt.k);
    let steps = a.steps.unwrap_or(cfg.adapt.steps);
    let base = load_single(&a.checkpoint, "--checkpoint")?;
    let ad = make_adaptation_set(&suite.catalog, &sp, k, &cfg.adapt.seeds()).map_err(|e| Failure::Runtime(e.into()))?;
    write_json(&out.join("adaptation-set.json"), &ad)?;
    let env = env_for(cfg);
    let pool = build_pool(cfg, &suite, &env, out)?;
    let none = evaluate("none", &Adapted::Single(base.clone()), &sp.test, &pool, &cfg.eval, cfg.clock).map_err(anyhow::Error::from)?;
    write_report(&out.join("reports"), "none", &none)?;
    let mut summary = BTreeMap::new();
    summary.insert("none".to_string(), none.success_mean);
    println!("{:<8} {:.1}", "none", none.success_mean);
    for s in strategies {
        let name = match s {
            AdaptStrategy::AllApp => "all-app",
            AdaptStrategy::PerApp => "per-app",
        };
        let adapted = adapt_few_shot(&base, &ad, s, steps, &cfg.train, &pool, cfg.clock).map_err(anyhow::Error::from)?;
        write_json(&out.join(format!("adapted-{name}.json")), &adapted)?;
        let r = evaluate(name, &adapted, &sp.test, &pool, &cfg.eval, cfg.clock).map_err(anyhow::Error::from)?;
        write_report(&out.join("reports"), name, &r)?;
        println!("{name:<8} {:.1}", r.success_mean);
        summary.insert(name.to_string(), r.success_mean);
    }
    write_json(&out.join("adapt.json"), &serde_json::json!({ "k": k, "steps": steps, "success": summary }))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, alias = "pool-size", value_delimiter = ',')]
    pub pool_sizes: Option<Vec<usize>>,
    /// Rows to report: async, sync-barrier, sequential or all.
    #[arg(long, default_value = "all")]
    pub mode: String,
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Rollouts sharing one context.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Async micro-batch linger, scaled ms.
    #[arg(long)]
    pub linger: Option<f64>,
    #[arg(long)]
    pub inference_batch_max: Option<usize>,
}

pub fn profile(a: &ProfileArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let out = &a.common.out;
    let mut p = cfg.profile.clone();
    if let Some(s) = &a.pool_sizes {
        p.pool_sizes = s.clone();
    }
    if let Some(r) = a.rollouts {
        p.rollouts = r;
    }
    if let Some(g) = a.group_size {
        p.group_size = g;
    }
    if let Some(l) = a.linger {
        p.linger_ms = l;
    }
    if let Some(b) = a.inference_batch_max {
        p.inference_batch_max = b;
    }
    if p.pool_sizes.is_empty() || p.pool_sizes.contains(&0) {
        return Err(config_err("--pool-sizes", "sizes must be at least 1"));
    }
    if p.rollouts == 0 || p.group_size == 0 || p.inference_batch_max == 0 {
        return Err(config_err("profile", "rollouts, group size and inference batch max must be at least 1"));
    }
    if !(p.linger_ms >= 0.0) {
        return Err(config_err("--linger", "must be non-negative"));
    }
    let modes: Vec<CollectMode> = if a.mode == "all" {
        CollectMode::ALL.to_vec()
    } else {
        vec![a.mode.parse().map_err(|e| config_err("--mode", e))?]
    };
    let suite = load_suite(&a.common, cfg)?;
    let seed = cfg.split.train_seeds[0];
    let mut contexts = Vec::new();
    for (app, t) in suite.catalog.templates() {
        let c = Context::new(app, t, seed).map_err(|e| anyhow!("{}: {e}", t.template_id))?;
        contexts.extend(std::iter::repeat_n(c, p.group_size));
    }
    let policy = Params64::init(policy_config(cfg, &suite));
    let pc = ProfileConfig {
        pool_sizes: p.pool_sizes.clone(),
        rollouts: p.rollouts,
        episode_steps: p.episode_steps,
        seed: p.seed,
        env: env_for(cfg),
        linger_ms: p.linger_ms,
        inference_batch_max: p.inference_batch_max,
        inference_cost: p.inference_cost,
        clock: cfg.clock,
    };
    let rows = run_profile(suite, &contexts, &policy, &pc).map_err(anyhow::Error::from)?;
    let rows: Vec<ProfileRow> = rows.into_iter().filter(|r| modes.contains(&r.mode)).collect();
    let mut csv = format!("{}\n", ProfileRow::csv_header());
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv_row());
    }
    write_text(&out.join("profile.csv"), &csv)?;
    write_json(&out.join("profile.json"), &rows)?;
    let mut plot = String::from("pool_size");
    for m in &modes {
        let _ = write!(plot, ",{m}_wall_ms");
    }
    plot.push('\n');
    for &size in &p.pool_sizes {
        let _ = write!(plot, "{size}");
        for m in &modes {
            let w = rows.iter().find(|r| r.pool_size == size && r.mode == *m).map_or(f64::NAN, |r| r.wall_ms);
            let _ = write!(plot, ",{w:.3}");
        }
        plot.push('\n');
    }
    write_text(&out.join("plot-wall.csv"), &plot)?;
    print!("{csv}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Stop after this long instead of waiting for a signal.
    #[arg(long)]
    pub duration_ms: Option<u64>,
    /// Per-request JSON log lines from the workers on stderr.
    #[arg(long)]
    pub log: bool,
}

pub fn serve(a: &ServeArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let out = &a.common.out;
    let n = a.workers.unwrap_or(cfg.workers.count);
    if n == 0 {
        return Err(config_err("--workers", "must be at least 1"));
    }
    let suite = load_suite(&a.common, cfg)?;
    let mut spec = self_launch_spec(cfg, &suite, &env_for(cfg), &out.join("workers"))?;
    if a.log {
        spec.args.push("--log".into());
        spec.inherit_stderr = true;
    }
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing the signal handler")?;
    let (mut workers, report) = spawn_worker_pool(n, &spec).map_err(anyhow::Error::from)?;
    for (id, reason) in &report.failures {
        eprintln!("worker {id} did not start: {reason}");
    }
    let publish = |ws: &[mobirl_wire::HttpWorker]| -> anyhow::Result<Vec<WorkerEndpoint>> {
        let eps: Vec<WorkerEndpoint> = ws.iter().map(|w| w.endpoint()).collect();
        write_json(&out.join("endpoints.json"), &eps)?;
        Ok(eps)
    };
    for e in publish(&workers)? {
        println!("worker {} {}", e.worker_id, e.base_url);
    }
    let t0 = Instant::now();
    let mut last_check = Instant::now();
    let mut restarts = 0usize;
    while !stop.load(Ordering::SeqCst) && a.duration_ms.is_none_or(|d| t0.elapsed() < Duration::from_millis(d)) {
        std::thread::sleep(Duration::from_millis(50));
        if last_check.elapsed() < Duration::from_secs(1) {
            continue;
        }
        last_check = Instant::now();
        let mut changed = false;
        for w in workers.iter_mut() {
            if w.client().health().is_err() {
                match w.restart() {
                    Ok(()) => {
                        restarts += 1;
                        changed = true;
                        eprintln!("worker {} restarted at {}", w.id(), w.client().base_url());
                    }
                    Err(e) => eprintln!("worker {} restart failed: {e}", w.id()),
                }
            }
        }
        if changed {
            publish(&workers)?;
        }
    }
    println!("stopping {} workers after {:.1}s ({restarts} restarts)", workers.len(), t0.elapsed().as_secs_f64());
    Ok(())
}
