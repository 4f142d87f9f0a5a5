//! JSON bodies of the worker endpoints.

use mobirl_core::cmdp::{Action, Context, Observation};
use serde::{Deserialize, Serialize};

pub const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetRequest {
    pub context: Context,
    pub episode_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetResponse {
    pub session_id: String,
    pub observation: Observation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub session_id: String,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub observation: Observation,
    pub done: bool,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_reward: Option<u8>,
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerStatus {
    Idle,
    Busy,
    Unhealthy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub worker_id: usize,
    pub status: WorkerStatus,
    pub uptime_ms: u64,
    pub active_session: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRequest {
    pub session_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortResponse {
    /// False when the id did not name the active session.
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub reward: u8,
    pub truncated: bool,
}

/// The active session, as returned by `GET /session`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub context: Context,
    pub episode_seed: u64,
    pub step_count: u32,
    /// Milliseconds since the worker started.
    pub created_at_ms: u64,
    pub terminal: Option<Terminal>,
    /// Set when the environment crashed under this session.
    #[serde(default)]
    pub crashed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
