//! Worker processes, remote workers and pool spawning.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use mobirl_core::cmdp::{Action, Context, Observation};
use mobirl_core::rollout::{EnvFailure, EnvWorker};
use mobirl_core::sim::StepOutcome;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::EnvClient;
use crate::protocol::{ResetRequest, StepRequest, WorkerStatus};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no worker became ready ({0} launch failures)")]
    NoneReady(usize),
    #[error("worker {worker}: {reason}")]
    Launch { worker: usize, reason: String },
}

/// How to start one worker. The pool appends `--worker-id N --bind ADDR`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaunchSpec {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    pub bind_host: String,
    pub ready_timeout_ms: u64,
    pub request_timeout_ms: u64,
    pub retries: usize,
    /// Keep worker stderr (request logs) instead of discarding it.
    pub inherit_stderr: bool,
}

impl Default for LaunchSpec {
    fn default() -> Self {
        LaunchSpec {
            program: PathBuf::from("mobirl-worker"),
            args: Vec::new(),
            env: Vec::new(),
            bind_host: "127.0.0.1".into(),
            ready_timeout_ms: 10_000,
            request_timeout_ms: 5_000,
            retries: 2,
            inherit_stderr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerEndpoint {
    pub base_url: String,
    pub worker_id: usize,
    pub status: WorkerStatus,
    /// Milliseconds since the Unix epoch.
    pub last_heartbeat: u64,
    pub session: Option<String>,
}

fn epoch_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// A running worker process; killed on drop.
#[derive(Debug)]
pub struct WorkerProcess {
    pub worker_id: usize,
    pub base_url: String,
    child: Child,
}

impl WorkerProcess {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for WorkerProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Starts one worker and waits until it answers /health.
pub fn launch(spec: &LaunchSpec, worker_id: usize) -> Result<WorkerProcess, PoolError> {
    let fail = |reason: String| PoolError::Launch { worker: worker_id, reason };
    let mut cmd = Command::new(&spec.program);
    cmd.args(&spec.args)
        .arg("--worker-id")
        .arg(worker_id.to_string())
        .arg("--bind")
        .arg(format!("{}:0", spec.bind_host))
        .envs(spec.env.iter().cloned())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(if spec.inherit_stderr { Stdio::inherit() } else { Stdio::null() });
    let mut child = cmd.spawn().map_err(|e| fail(format!("spawn {}: {e}", spec.program.display())))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut lines = BufReader::new(stdout).lines();
        let addr = lines.by_ref().map_while(Result::ok).find_map(|l| l.strip_prefix("LISTENING ").map(str::to_string));
        let _ = tx.send(addr);
        // keep draining so the worker never blocks on a full pipe
        for _ in lines {}
    });
    let deadline = Instant::now() + Duration::from_millis(spec.ready_timeout_ms);
    let addr = match rx.recv_timeout(Duration::from_millis(spec.ready_timeout_ms)) {
        Ok(Some(a)) => a,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(fail("exited before listening".into()));
        }
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(fail("no address within the readiness timeout".into()));
        }
    };
    let proc = WorkerProcess { worker_id, base_url: format!("http://{addr}"), child };
    let probe = EnvClient::new(&proc.base_url, Duration::from_millis(spec.request_timeout_ms.min(1000)), 0);
    loop {
        if probe.health().is_ok() {
            return Ok(proc);
        }
        if Instant::now() >= deadline {
            return Err(fail("health check did not pass within the readiness timeout".into()));
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// Remote environment worker. With a launch spec it owns its process and
/// restarts by relaunching it under the same id.
pub struct HttpWorker {
    id: usize,
    client: EnvClient,
    session: Option<String>,
    process: Option<WorkerProcess>,
    spec: Option<LaunchSpec>,
    timeout: Duration,
    retries: usize,
}

impl HttpWorker {
    /// Worker at a fixed address that this side does not manage.
    pub fn connect(id: usize, base_url: &str, timeout: Duration, retries: usize) -> Self {
        HttpWorker { id, client: EnvClient::new(base_url, timeout, retries), session: None, process: None, spec: None, timeout, retries }
    }

    pub fn launch(spec: &LaunchSpec, id: usize) -> Result<Self, PoolError> {
        let p = launch(spec, id)?;
        let timeout = Duration::from_millis(spec.request_timeout_ms);
        Ok(HttpWorker {
            id,
            client: EnvClient::new(&p.base_url, timeout, spec.retries),
            session: None,
            process: Some(p),
            spec: Some(spec.clone()),
            timeout,
            retries: spec.retries,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn pid(&self) -> Option<u32> {
        self.process.as_ref().map(WorkerProcess::pid)
    }

    pub fn client(&self) -> &EnvClient {
        &self.client
    }

    pub fn endpoint(&self) -> WorkerEndpoint {
        let (status, session) = match self.client.health() {
            Ok(h) => (h.status, h.active_session),
            Err(_) => (WorkerStatus::Unhealthy, None),
        };
        WorkerEndpoint { base_url: self.client.base_url().to_string(), worker_id: self.id, status, last_heartbeat: epoch_ms(), session }
    }
}

impl EnvWorker for HttpWorker {
    fn reset(&mut self, ctx: &Context, episode_seed: u64) -> Result<Observation, EnvFailure> {
        if self.session.is_some() {
            self.abort();
        }
        let r = self.client.reset(&ResetRequest { context: ctx.clone(), episode_seed })?;
        self.session = Some(r.session_id);
        Ok(r.observation)
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvFailure> {
        let session_id = self.session.clone().ok_or_else(|| EnvFailure::Protocol("step without a session".into()))?;
        let r = self.client.step(&StepRequest { session_id, action: action.clone() })?;
        if r.done {
            self.session = None;
        }
        Ok(StepOutcome {
            observation: r.observation,
            done: r.done,
            truncated: r.truncated,
            reward: r.reward,
            true_reward: r.true_reward,
            latency_ms: r.latency_ms,
        })
    }

    fn abort(&mut self) {
        if let Some(s) = self.session.take() {
            let _ = self.client.abort(&s);
        }
    }

    fn restart(&mut self) -> Result<(), EnvFailure> {
        self.session = None;
        match &self.spec {
            Some(spec) => {
                if let Some(mut p) = self.process.take() {
                    p.kill();
                }
                let p = launch(spec, self.id).map_err(|e| EnvFailure::Crashed(e.to_string()))?;
                self.client = EnvClient::new(&p.base_url, self.timeout, self.retries);
                self.process = Some(p);
                Ok(())
            }
            None => {
                let h = self.client.health()?;
                if let Some(s) = h.active_session {
                    self.client.abort(&s)?;
                }
                Ok(())
            }
        }
    }

    fn label(&self) -> String {
        format!("http-{}@{}", self.id, self.client.base_url())
    }
}

/// Workers that came up, and the ones that did not.
#[derive(Debug)]
pub struct SpawnReport {
    pub ready: Vec<usize>,
    pub failures: Vec<(usize, String)>,
}

/// Launches `n` identical workers in parallel. Partial readiness is
/// reported; zero ready workers is an error.
pub fn spawn_worker_pool(n: usize, spec: &LaunchSpec) -> Result<(Vec<HttpWorker>, SpawnReport), PoolError> {
    spawn_workers(&vec![spec.clone(); n])
}

/// Worker i runs `specs[i]`.
pub fn spawn_workers(specs: &[LaunchSpec]) -> Result<(Vec<HttpWorker>, SpawnReport), PoolError> {
    let results: Vec<Result<HttpWorker, PoolError>> = std::thread::scope(|s| {
        let hs: Vec<_> = specs.iter().enumerate().map(|(i, spec)| s.spawn(move || HttpWorker::launch(spec, i))).collect();
        hs.into_iter().map(|h| h.join().expect("launch thread")).collect()
    });
    let mut workers = Vec::new();
    let mut report = SpawnReport { ready: Vec::new(), failures: Vec::new() };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(w) => {
                report.ready.push(i);
                workers.push(w);
            }
            Err(e) => report.failures.push((i, e.to_string())),
        }
    }
    if workers.is_empty() {
        return Err(PoolError::NoneReady(report.failures.len()));
    }
    Ok((workers, report))
}
