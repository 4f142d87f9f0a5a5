//! Run configuration: one TOML file, layered over defaults, with
//! `MOBIRL__SECTION__FIELD=value` environment overrides and `--set` pairs.

use std::collections::BTreeMap;
use std::path::Path;

use mobirl_core::bench::SplitConfig;
use mobirl_core::eval::EvalConfig;
use mobirl_core::rollout::InferenceCost;
use mobirl_core::sim::{ClockMode, EnvConfig, SuiteConfig};
use mobirl_core::trainer::{BcConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "MOBIRL__";

/// Field-level schema problems; each entry reads `path: message`.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn one(path: &str, msg: impl std::fmt::Display) -> Self {
        ConfigError(vec![format!("{path}: {msg}")])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySection {
    pub hidden: usize,
    pub init_seed: u64,
    pub history_window: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection { hidden: 64, init_seed: 0, history_window: mobirl_core::cmdp::DEFAULT_HISTORY_WINDOW }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSection {
    /// Adaptation instances per unseen app.
    pub k: usize,
    pub steps: u64,
    pub seed_start: u64,
    pub seed_count: u64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection { k: 8, steps: 50, seed_start: 5000, seed_count: 200 }
    }
}

impl AdaptSection {
    pub fn seeds(&self) -> Vec<u64> {
        (self.seed_start..self.seed_start + self.seed_count).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSourceSection {
    pub fp_rate: f64,
    pub judge_seed: u64,
}

impl Default for RewardSourceSection {
    fn default() -> Self {
        RewardSourceSection { fp_rate: 0.2, judge_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSection {
    pub pool_sizes: Vec<usize>,
    pub rollouts: usize,
    pub group_size: usize,
    pub episode_steps: usize,
    pub seed: u64,
    pub linger_ms: f64,
    pub inference_batch_max: usize,
    pub inference_cost: InferenceCost,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            pool_sizes: vec![1, 4, 8, 16],
            rollouts: 16,
            group_size: 1,
            episode_steps: 15,
            seed: 0,
            linger_ms: 0.002,
            inference_batch_max: 16,
            inference_cost: InferenceCost::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Simulators inside this process.
    Local,
    /// One `mobirl worker` process per worker, spoken to over HTTP.
    Process,
    /// Already running workers at `endpoints`.
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkersSection {
    pub count: usize,
    pub backend: Backend,
    pub endpoints: Vec<String>,
    pub request_timeout_ms: u64,
    pub ready_timeout_ms: u64,
    pub retries: usize,
}

impl Default for WorkersSection {
    fn default() -> Self {
        WorkersSection {
            count: 16,
            backend: Backend::Local,
            endpoints: Vec::new(),
            request_timeout_ms: 5_000,
            ready_timeout_ms: 10_000,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub clock: ClockMode,
    pub suite: SuiteConfig,
    pub split: SplitConfig,
    pub env: EnvConfig,
    pub policy: PolicySection,
    pub warm_start: BcConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub adapt: AdaptSection,
    pub reward_source: RewardSourceSection,
    pub profile: ProfileSection,
    pub workers: WorkersSection,
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn unknown_keys(user: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => out.push(format!("{path}: unknown field")),
            (Some(Value::Table(kn)), Value::Table(u)) => unknown_keys(u, kn, &path, out),
            _ => {}
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("bad key `{path}`"));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let e = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = e.as_table_mut().ok_or_else(|| format!("`{p}` in `{path}` is not a section"))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, else a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Everything the user asked for, before defaults are applied.
fn user_table(text: Option<&str>, env: &[(String, String)], sets: &[String]) -> Result<Table, ConfigError> {
    let mut user = match text {
        Some(t) => t.parse::<Table>().map_err(|e| ConfigError::one("config", e.to_string().trim()))?,
        None => Table::new(),
    };
    let mut errs = Vec::new();
    let mut env: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        let path = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
        if let Err(e) = set_path(&mut user, &path, parse_value(v)) {
            errs.push(format!("{k}: {e}"));
        }
    }
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = set_path(&mut user, k.trim(), parse_value(v.trim())) {
                    errs.push(format!("--set {s}: {e}"));
                }
            }
            None => errs.push(format!("--set {s}: expected KEY=VALUE")),
        }
    }
    if errs.is_empty() {
        Ok(user)
    } else {
        Err(ConfigError(errs))
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::one("config", format!("{}: {e}", p.display())))?),
            None => None,
        };
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::from_sources(text.as_deref(), &env, sets)
    }

    pub fn from_sources(text: Option<&str>, env: &[(String, String)], sets: &[String]) -> Result<Self, ConfigError> {
        let user = user_table(text, env, sets)?;
        let mut merged = Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, &user);
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::one(&path, e.into_inner().message())
        })?;
        let mut errs = Vec::new();
        let known = Table::try_from(&cfg).expect("config serializes");
        unknown_keys(&user, &known, "", &mut errs);
        errs.extend(cfg.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError(errs))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        let mut check = |ok: bool, path: &str, msg: &str| {
            if !ok {
                e.push(format!("{path}: {msg}"));
            }
        };
        check(self.suite.n_apps >= 1, "suite.n_apps", "must be at least 1");
        check(self.suite.templates_per_app >= 1, "suite.templates_per_app", "must be at least 1");
        check(!self.suite.skills.is_empty(), "suite.skills", "must not be empty");
        check(self.split.ratio.0 > 0 && self.split.ratio.1 > 0, "split.ratio", "both parts must be positive");
        check(self.split.tolerance >= 0.0, "split.tolerance", "must be non-negative");
        check(!self.split.eval_seeds.is_empty(), "split.eval_seeds", "must not be empty");
        check(!self.split.train_seeds.is_empty(), "split.train_seeds", "must not be empty");
        check(self.policy.hidden >= 1, "policy.hidden", "must be at least 1");
        check(self.warm_start.batch >= 1, "warm_start.batch", "must be at least 1");
        check(self.warm_start.lr >= 0.0, "warm_start.lr", "must be non-negative");
        check(self.eval.step_cap >= 1, "eval.step_cap", "must be at least 1");
        if let mobirl_core::rollout::Decode::Sampled(t) = self.eval.decode {
            check(t > 0.0 && t.is_finite(), "eval.decode", "temperature must be positive");
        }
        check(self.adapt.k >= 1, "adapt.k", "must be at least 1");
        check(self.adapt.seed_count >= self.adapt.k as u64, "adapt.seed_count", "must be at least adapt.k");
        check((0.0..=1.0).contains(&self.reward_source.fp_rate), "reward_source.fp_rate", "must lie in [0, 1]");
        check(!self.profile.pool_sizes.is_empty(), "profile.pool_sizes", "must not be empty");
        check(self.profile.pool_sizes.iter().all(|&p| p >= 1), "profile.pool_sizes", "sizes must be at least 1");
        check(self.profile.rollouts >= 1, "profile.rollouts", "must be at least 1");
        check(self.profile.group_size >= 1, "profile.group_size", "must be at least 1");
        check(self.profile.episode_steps >= 1, "profile.episode_steps", "must be at least 1");
        check(self.profile.inference_batch_max >= 1, "profile.inference_batch_max", "must be at least 1");
        check(self.workers.count >= 1, "workers.count", "must be at least 1");
        check(
            self.workers.backend != Backend::Remote || !self.workers.endpoints.is_empty(),
            "workers.endpoints",
            "the remote backend needs at least one endpoint",
        );
        if let Err(m) = self.env.validate() {
            e.push(format!("env: {m}"));
        }
        if let Err(m) = self.train.validate() {
            e.push(format!("train: {m}"));
        }
        e
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed_set(&self) -> BTreeMap<String, u64> {
        [
            ("suite", self.suite.seed),
            ("split.search", self.split.search_seed),
            ("policy.init", self.policy.init_seed),
            ("warm_start", self.warm_start.seed),
            ("train", self.train.seed),
            ("eval", self.eval.seed),
            ("env.latency", self.env.latency.seed),
            ("env.faults", self.env.faults.seed),
            ("reward_source.judge", self.reward_source.judge_seed),
            ("profile", self.profile.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
