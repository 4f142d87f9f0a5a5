//! Environment workers and the pool the scheduler draws from.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{Action, Context, Observation};
use crate::sim::{EnvConfig, EnvError, SimEnv, StepOutcome, Suite};

/// Classified environment failure. Nothing else crosses the worker boundary.
#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvFailure {
    #[error("request timed out")]
    Timeout,
    #[error("connection refused")]
    ConnectionRefused,
    #[error("server error {0}")]
    ServerError(u16),
    #[error("environment crashed: {0}")]
    Crashed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl From<EnvError> for EnvFailure {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Crashed { step } => EnvFailure::Crashed(format!("at step {step}")),
            other => EnvFailure::Protocol(other.to_string()),
        }
    }
}

/// One environment instance, local or remote. Holds at most one session.
pub trait EnvWorker: Send {
    fn reset(&mut self, ctx: &Context, episode_seed: u64) -> Result<Observation, EnvFailure>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvFailure>;
    /// Drops the current session, if any. Never fails.
    fn abort(&mut self);
    /// Brings a failed worker back with the same id and a fresh session space.
    fn restart(&mut self) -> Result<(), EnvFailure>;
    fn label(&self) -> String;
}

/// In-process simulator worker with a kill switch for chaos tests.
pub struct LocalWorker {
    id: usize,
    env: SimEnv,
    killed: Arc<AtomicBool>,
}

impl LocalWorker {
    pub fn new(id: usize, suite: Arc<Suite>, cfg: EnvConfig) -> Self {
        LocalWorker { id, env: SimEnv::new(suite, cfg), killed: Arc::new(AtomicBool::new(false)) }
    }

    /// Setting the flag makes every request fail until `restart`.
    pub fn kill_switch(&self) -> Arc<AtomicBool> {
        self.killed.clone()
    }

    fn alive(&self) -> Result<(), EnvFailure> {
        if self.killed.load(Ordering::SeqCst) {
            Err(EnvFailure::ConnectionRefused)
        } else {
            Ok(())
        }
    }
}

impl EnvWorker for LocalWorker {
    fn reset(&mut self, ctx: &Context, episode_seed: u64) -> Result<Observation, EnvFailure> {
        self.alive()?;
        Ok(self.env.reset(ctx, episode_seed)?)
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvFailure> {
        self.alive()?;
        Ok(self.env.step(action)?)
    }

    fn abort(&mut self) {}

    fn restart(&mut self) -> Result<(), EnvFailure> {
        self.killed.store(false, Ordering::SeqCst);
        self.env = SimEnv::new(self.env.suite().clone(), self.env.config().clone());
        Ok(())
    }

    fn label(&self) -> String {
        format!("local-{}", self.id)
    }
}

/// Fixed set of workers; index = worker id.
pub struct WorkerPool {
    workers: Vec<Mutex<Box<dyn EnvWorker>>>,
}

impl WorkerPool {
    pub fn new(workers: Vec<Box<dyn EnvWorker>>) -> Self {
        WorkerPool { workers: workers.into_iter().map(Mutex::new).collect() }
    }

    /// `n` in-process simulators sharing one suite.
    pub fn local(n: usize, suite: Arc<Suite>, cfg: &EnvConfig) -> Self {
        Self::new((0..n).map(|i| Box::new(LocalWorker::new(i, suite.clone(), cfg.clone())) as Box<dyn EnvWorker>).collect())
    }

    /// Like `local`, also returning each worker's kill switch.
    pub fn local_with_switches(n: usize, suite: Arc<Suite>, cfg: &EnvConfig) -> (Self, Vec<Arc<AtomicBool>>) {
        let workers: Vec<LocalWorker> = (0..n).map(|i| LocalWorker::new(i, suite.clone(), cfg.clone())).collect();
        let switches = workers.iter().map(|w| w.kill_switch()).collect();
        (Self::new(workers.into_iter().map(|w| Box::new(w) as Box<dyn EnvWorker>).collect()), switches)
    }

    pub fn size(&self) -> usize {
        self.workers.len()
    }

    pub fn worker(&self, i: usize) -> MutexGuard<'_, Box<dyn EnvWorker>> {
        self.workers[i].lock().unwrap_or_else(|p| p.into_inner())
    }
}
