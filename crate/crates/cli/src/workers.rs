//! Worker pools for each backend.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;
use mobirl_core::rollout::{EnvWorker, WorkerPool};
use mobirl_core::sim::{EnvConfig, Suite};
use mobirl_wire::{spawn_worker_pool, HttpWorker, LaunchSpec};

use crate::config::{Backend, RunConfig};

/// Launch spec that re-enters this binary as `mobirl worker`, with the
/// suite and environment written under `dir`.
pub fn self_launch_spec(cfg: &RunConfig, suite: &Suite, env: &EnvConfig, dir: &Path) -> anyhow::Result<LaunchSpec> {
    std::fs::create_dir_all(dir)?;
    let suite_path = dir.join("suite.json");
    let env_path = dir.join("env.json");
    std::fs::write(&suite_path, serde_json::to_vec(suite)?)?;
    std::fs::write(&env_path, serde_json::to_vec_pretty(env)?)?;
    let program = std::env::current_exe().context("locating the mobirl binary")?;
    Ok(LaunchSpec {
        program,
        args: vec![
            "worker".into(),
            "--suite".into(),
            suite_path.display().to_string(),
            "--env".into(),
            env_path.display().to_string(),
        ],
        ready_timeout_ms: cfg.workers.ready_timeout_ms,
        request_timeout_ms: cfg.workers.request_timeout_ms,
        retries: cfg.workers.retries,
        ..LaunchSpec::default()
    })
}

pub fn build_pool(cfg: &RunConfig, suite: &Arc<Suite>, env: &EnvConfig, out: &Path) -> anyhow::Result<WorkerPool> {
    let w = &cfg.workers;
    match w.backend {
        Backend::Local => Ok(WorkerPool::local(w.count, suite.clone(), env)),
        Backend::Process => {
            let spec = self_launch_spec(cfg, suite, env, &out.join("workers"))?;
            let (ws, report) = spawn_worker_pool(w.count, &spec)?;
            for (id, reason) in &report.failures {
                eprintln!("worker {id} did not start: {reason}");
            }
            Ok(WorkerPool::new(ws.into_iter().map(|x| Box::new(x) as Box<dyn EnvWorker>).collect()))
        }
        Backend::Remote => {
            let timeout = Duration::from_millis(w.request_timeout_ms);
            let ws: Vec<Box<dyn EnvWorker>> = w
                .endpoints
                .iter()
                .enumerate()
                .map(|(i, url)| Box::new(HttpWorker::connect(i, url, timeout, w.retries)) as Box<dyn EnvWorker>)
                .collect();
            Ok(WorkerPool::new(ws))
        }
    }
}
