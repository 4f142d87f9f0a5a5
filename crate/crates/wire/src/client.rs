//! Blocking client with classified failures.

use std::io::ErrorKind;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use mobirl_core::rollout::EnvFailure;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::protocol::*;

#[derive(Debug)]
pub struct EnvClient {
    base: String,
    agent: ureq::Agent,
    /// Extra attempts for idempotent requests.
    retries: usize,
    next_id: AtomicU64,
}

fn classify(e: ureq::Error) -> EnvFailure {
    match e {
        ureq::Error::Timeout(_) => EnvFailure::Timeout,
        ureq::Error::Io(io) => match io.kind() {
            ErrorKind::TimedOut | ErrorKind::WouldBlock => EnvFailure::Timeout,
            ErrorKind::ConnectionRefused
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::BrokenPipe
            | ErrorKind::UnexpectedEof
            | ErrorKind::NotConnected => EnvFailure::ConnectionRefused,
            _ => EnvFailure::Protocol(io.to_string()),
        },
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => EnvFailure::ConnectionRefused,
        ureq::Error::StatusCode(c) => EnvFailure::ServerError(c),
        other => EnvFailure::Protocol(other.to_string()),
    }
}

fn retryable(f: &EnvFailure) -> bool {
    match f {
        EnvFailure::Timeout | EnvFailure::ConnectionRefused => true,
        EnvFailure::ServerError(c) => *c >= 500,
        _ => false,
    }
}

impl EnvClient {
    /// `timeout` bounds every request end to end.
    pub fn new(base_url: &str, timeout: Duration, retries: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        EnvClient { base: base_url.trim_end_matches('/').to_string(), agent, retries, next_id: AtomicU64::new(0) }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn request_id(&self) -> String {
        format!("{}#{}", self.base, self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn once<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<R, EnvFailure> {
        let url = format!("{}{}", self.base, path);
        let rid = self.request_id();
        let resp = match body {
            Some(b) => self.agent.post(&url).header(REQUEST_ID_HEADER, &rid).send_json(b),
            None => self.agent.get(&url).header(REQUEST_ID_HEADER, &rid).call(),
        }
        .map_err(classify)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(EnvFailure::ServerError(status));
        }
        resp.into_body().read_json::<R>().map_err(classify)
    }

    fn idempotent<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<R, EnvFailure> {
        let mut attempt = 0;
        loop {
            match self.once(path, body) {
                Err(f) if attempt < self.retries && retryable(&f) => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(5 * attempt as u64));
                }
                r => return r,
            }
        }
    }

    pub fn reset(&self, req: &ResetRequest) -> Result<ResetResponse, EnvFailure> {
        self.once("/reset", Some(req))
    }

    /// Never retried: a step that timed out may or may not have happened.
    pub fn step(&self, req: &StepRequest) -> Result<StepResponse, EnvFailure> {
        self.once("/step", Some(req))
    }

    pub fn abort(&self, session_id: &str) -> Result<AbortResponse, EnvFailure> {
        self.idempotent("/abort", Some(&AbortRequest { session_id: session_id.to_string() }))
    }

    pub fn health(&self) -> Result<HealthResponse, EnvFailure> {
        self.idempotent::<(), _>("/health", None)
    }

    pub fn session(&self) -> Result<Option<SessionRecord>, EnvFailure> {
        self.idempotent::<(), _>("/session", None)
    }
}
