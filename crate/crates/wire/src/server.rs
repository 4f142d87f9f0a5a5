//! The worker: one simulator behind an HTTP interface, one session at a time.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mobirl_core::sim::{EnvConfig, EnvError, SimEnv, Suite};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;

use crate::protocol::*;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub worker_id: usize,
    pub env: EnvConfig,
    /// Exit the process on an injected crash instead of answering 500.
    pub exit_on_crash: bool,
    /// One JSON line per request on stderr.
    pub log: bool,
}

struct Worker {
    env: SimEnv,
    session: Option<SessionRecord>,
    next_session: u64,
}

#[derive(Clone)]
struct Shared {
    cfg: Arc<ServeConfig>,
    started: Instant,
    worker: Arc<Mutex<Worker>>,
    /// Copy of the session id for /health while a step holds the worker.
    active: Arc<Mutex<Option<String>>>,
}

impl Shared {
    fn uptime_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn log(&self, headers: &HeaderMap, path: &str, status: StatusCode, t0: Instant) {
        if !self.cfg.log {
            return;
        }
        let rid = headers.get(REQUEST_ID_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("");
        let line = serde_json::json!({
            "worker": self.cfg.worker_id,
            "request_id": rid,
            "path": path,
            "status": status.as_u16(),
            "ms": t0.elapsed().as_secs_f64() * 1000.0,
        });
        eprintln!("{line}");
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

#[allow(clippy::result_large_err)]
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

fn ok<T: Serialize>(v: T) -> Response {
    (StatusCode::OK, Json(v)).into_response()
}

/// Runs the blocking part of a handler on the blocking pool.
async fn blocking(shared: &Shared, f: impl FnOnce(&mut Worker, &ServeConfig, u64) -> Response + Send + 'static) -> Response {
    let s = shared.clone();
    tokio::task::spawn_blocking(move || {
        let now = s.uptime_ms();
        let mut w = s.worker.lock().unwrap_or_else(|p| p.into_inner());
        let r = f(&mut w, &s.cfg, now);
        *s.active.lock().unwrap_or_else(|p| p.into_inner()) = w.session.as_ref().filter(|x| x.terminal.is_none()).map(|x| x.session_id.clone());
        r
    })
    .await
    .unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn reset(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let t0 = Instant::now();
    let r = match parse::<ResetRequest>(&body) {
        Err(r) => r,
        Ok(req) => {
            blocking(&s, move |w, cfg, now| {
                if let Some(cur) = &w.session {
                    if cur.terminal.is_none() && !cur.crashed {
                        return error(StatusCode::CONFLICT, format!("session {} is active", cur.session_id));
                    }
                }
                match w.env.reset(&req.context, req.episode_seed) {
                    Ok(observation) => {
                        w.next_session += 1;
                        let session_id = format!("w{}-s{}", cfg.worker_id, w.next_session);
                        w.session = Some(SessionRecord {
                            session_id: session_id.clone(),
                            context: req.context,
                            episode_seed: req.episode_seed,
                            step_count: 0,
                            created_at_ms: now,
                            terminal: None,
                            crashed: false,
                        });
                        ok(ResetResponse { session_id, observation })
                    }
                    Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
                }
            })
            .await
        }
    };
    s.log(&headers, "/reset", r.status(), t0);
    r
}

async fn step(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let t0 = Instant::now();
    let r = match parse::<StepRequest>(&body) {
        Err(r) => r,
        Ok(req) => {
            blocking(&s, move |w, cfg, _| {
                let live = matches!(&w.session, Some(x) if x.session_id == req.session_id && x.terminal.is_none() && !x.crashed);
                if !live {
                    return error(StatusCode::CONFLICT, format!("no live session {}", req.session_id));
                }
                match w.env.step(&req.action) {
                    Ok(o) => {
                        let rec = w.session.as_mut().expect("checked live");
                        rec.step_count += 1;
                        if o.done {
                            rec.terminal = Some(Terminal { reward: o.reward.unwrap_or(0), truncated: o.truncated });
                        }
                        ok(StepResponse {
                            observation: o.observation,
                            done: o.done,
                            truncated: o.truncated,
                            reward: o.reward,
                            true_reward: o.true_reward,
                            latency_ms: o.latency_ms,
                        })
                    }
                    Err(EnvError::Crashed { step }) => {
                        if cfg.exit_on_crash {
                            eprintln!("{}", serde_json::json!({"worker": cfg.worker_id, "event": "crash", "step": step}));
                            std::process::exit(70);
                        }
                        if let Some(rec) = w.session.as_mut() {
                            rec.crashed = true;
                        }
                        error(StatusCode::INTERNAL_SERVER_ERROR, format!("environment crashed at step {step}"))
                    }
                    Err(e) => error(StatusCode::CONFLICT, e.to_string()),
                }
            })
            .await
        }
    };
    s.log(&headers, "/step", r.status(), t0);
    r
}

async fn abort(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let t0 = Instant::now();
    let r = match parse::<AbortRequest>(&body) {
        Err(r) => r,
        Ok(req) => {
            blocking(&s, move |w, _, _| {
                let hit = matches!(&w.session, Some(x) if x.session_id == req.session_id);
                if hit {
                    w.session = None;
                }
                ok(AbortResponse { ok: hit })
            })
            .await
        }
    };
    s.log(&headers, "/abort", r.status(), t0);
    r
}

async fn health(State(s): State<Shared>, headers: HeaderMap) -> Response {
    let t0 = Instant::now();
    let active = s.active.lock().unwrap_or_else(|p| p.into_inner()).clone();
    let r = ok(HealthResponse {
        worker_id: s.cfg.worker_id,
        status: if active.is_some() { WorkerStatus::Busy } else { WorkerStatus::Idle },
        uptime_ms: s.uptime_ms(),
        active_session: active,
    });
    s.log(&headers, "/health", r.status(), t0);
    r
}

async fn session(State(s): State<Shared>, headers: HeaderMap) -> Response {
    let t0 = Instant::now();
    let r = blocking(&s, |w, _, _| ok(w.session.clone())).await;
    s.log(&headers, "/session", r.status(), t0);
    r
}

pub fn router(suite: Arc<Suite>, cfg: ServeConfig) -> Router {
    let shared = Shared {
        worker: Arc::new(Mutex::new(Worker { env: SimEnv::new(suite, cfg.env.clone()), session: None, next_session: 0 })),
        cfg: Arc::new(cfg),
        started: Instant::now(),
        active: Arc::new(Mutex::new(None)),
    };
    Router::new()
        .route("/reset", post(reset))
        .route("/step", post(step))
        .route("/abort", post(abort))
        .route("/health", get(health))
        .route("/session", get(session))
        .with_state(shared)
}

/// Serves on `listener` until the process ends.
pub async fn serve(listener: TcpListener, suite: Arc<Suite>, cfg: ServeConfig) -> std::io::Result<()> {
    axum::serve(listener, router(suite, cfg)).await
}

/// Binds `addr` and serves on a fresh single-threaded runtime, calling
/// `on_ready` with the bound address first.
pub fn run_blocking(addr: SocketAddr, suite: Arc<Suite>, cfg: ServeConfig, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        on_ready(listener.local_addr()?);
        serve(listener, suite, cfg).await
    })
}
