//! HTTP front for simulator workers: protocol types, server, client and a
//! process-backed worker pool.

pub mod client;
pub mod pool;
pub mod protocol;
pub mod server;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use mobirl_core::sim::{build_default_suite, EnvConfig, Suite, SuiteConfig};

pub use client::EnvClient;
pub use pool::{launch, spawn_worker_pool, spawn_workers, HttpWorker, LaunchSpec, PoolError, SpawnReport, WorkerEndpoint, WorkerProcess};
pub use server::{router, run_blocking, serve, ServeConfig};

pub const BIND_ENV: &str = "MOBIRL_BIND";

/// Worker command line:
/// `[--worker-id N] [--bind ADDR] [--suite FILE | --suite-seed S --apps N --templates-per-app T]
///  [--env FILE] [--exit-on-crash] [--log]`.
/// The bind address falls back to `$MOBIRL_BIND`, then `127.0.0.1:0`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerArgs {
    pub worker_id: usize,
    pub bind: SocketAddr,
    pub suite: Option<PathBuf>,
    pub suite_config: SuiteConfig,
    pub env: Option<PathBuf>,
    pub exit_on_crash: bool,
    pub log: bool,
}

impl WorkerArgs {
    pub fn parse(args: &[String]) -> Result<Self, String> {
        let bind = std::env::var(BIND_ENV).unwrap_or_else(|_| "127.0.0.1:0".into());
        let mut out = WorkerArgs {
            worker_id: 0,
            bind: bind.parse().map_err(|e| format!("bind address `{bind}`: {e}"))?,
            suite: None,
            suite_config: SuiteConfig::default(),
            env: None,
            exit_on_crash: false,
            log: false,
        };
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let mut val = |name: &str| it.next().cloned().ok_or_else(|| format!("{name} needs a value"));
            let num = |s: String, name: &str| s.parse::<u64>().map_err(|e| format!("{name}: {e}"));
            match a.as_str() {
                "--worker-id" => out.worker_id = num(val(a)?, a)? as usize,
                "--bind" => {
                    let v = val(a)?;
                    out.bind = v.parse().map_err(|e| format!("bind address `{v}`: {e}"))?;
                }
                "--suite" => out.suite = Some(PathBuf::from(val(a)?)),
                "--suite-seed" => out.suite_config.seed = num(val(a)?, a)?,
                "--apps" => out.suite_config.n_apps = num(val(a)?, a)? as usize,
                "--templates-per-app" => out.suite_config.templates_per_app = num(val(a)?, a)? as usize,
                "--env" => out.env = Some(PathBuf::from(val(a)?)),
                "--exit-on-crash" => out.exit_on_crash = true,
                "--log" => out.log = true,
                other => return Err(format!("unknown argument `{other}`")),
            }
        }
        Ok(out)
    }

    pub fn load(&self) -> Result<(Arc<Suite>, EnvConfig), String> {
        let read = |p: &PathBuf| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
        let suite: Suite = match &self.suite {
            Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
            None => build_default_suite(&self.suite_config),
        };
        let env: EnvConfig = match &self.env {
            Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
            None => EnvConfig::default(),
        };
        env.validate()?;
        Ok((Arc::new(suite), env))
    }
}

/// Runs one worker until killed; prints `LISTENING <addr>` once bound.
pub fn worker_main(args: &[String]) -> Result<(), String> {
    let a = WorkerArgs::parse(args)?;
    let (suite, env) = a.load()?;
    let cfg = ServeConfig { worker_id: a.worker_id, env, exit_on_crash: a.exit_on_crash, log: a.log };
    run_blocking(a.bind, suite, cfg, |addr| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "LISTENING {addr}");
        let _ = out.flush();
    })
    .map_err(|e| e.to_string())
}
