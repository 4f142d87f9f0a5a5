//! Contexts, observations, actions and trajectories shared by every other
//! module. The serde encodings of these types are the canonical JSON used
//! on the wire and on disk.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::catalog::{TaskTemplate, TemplateError};

pub const SCREEN_WIDTH: i32 = 1120;
pub const SCREEN_HEIGHT: i32 = 504;
pub const DEFAULT_STEP_CAP: usize = 20;
pub const DEFAULT_HISTORY_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Difficulty {
    Easy = 1,
    Medium = 2,
    Hard = 3,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn level(self) -> u8 {
        self as u8
    }

    pub fn from_skill_count(n: usize) -> Difficulty {
        match n {
            0 | 1 => Difficulty::Easy,
            2 => Difficulty::Medium,
            _ => Difficulty::Hard,
        }
    }
}

impl TryFrom<u8> for Difficulty {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Difficulty::Easy),
            2 => Ok(Difficulty::Medium),
            3 => Ok(Difficulty::Hard),
            other => Err(format!("difficulty must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Difficulty> for u8 {
    fn from(d: Difficulty) -> u8 {
        d as u8
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    TaskCompletion,
    InformationRetrieval,
}

/// One task MDP: the (app, template, instance seed) triple plus what is
/// derived from it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub app_id: String,
    pub template_id: String,
    pub instance_seed: u64,
    pub difficulty: Difficulty,
    pub task_type: TaskType,
    pub instruction: String,
}

impl Context {
    pub fn new(app_id: &str, template: &TaskTemplate, instance_seed: u64) -> Result<Self, TemplateError> {
        Ok(Context {
            app_id: app_id.to_string(),
            template_id: template.template_id.clone(),
            instance_seed,
            difficulty: template.difficulty,
            task_type: template.task_type,
            instruction: crate::catalog::render_instruction(template, instance_seed)?,
        })
    }

    /// Stable 64-bit key for seeding per-context randomness.
    pub fn key(&self) -> u64 {
        crate::hashing::combine(&[
            crate::hashing::fnv1a_str(&self.app_id),
            crate::hashing::fnv1a_str(&self.template_id),
            self.instance_seed,
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Button,
    TextField,
    ListItem,
    Toggle,
    Label,
}

impl WidgetKind {
    pub const ALL: [WidgetKind; 5] = [
        WidgetKind::Button,
        WidgetKind::TextField,
        WidgetKind::ListItem,
        WidgetKind::Toggle,
        WidgetKind::Label,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn center(&self) -> (i32, i32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn within_screen(&self) -> bool {
        self.x >= 0 && self.y >= 0 && self.w > 0 && self.h > 0 && self.x + self.w <= SCREEN_WIDTH && self.y + self.h <= SCREEN_HEIGHT
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Widget {
    pub widget_id: String,
    pub kind: WidgetKind,
    pub text: String,
    pub bounds: Rect,
    #[serde(default)]
    pub focused: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub screen_id: String,
    pub widgets: Vec<Widget>,
    pub step_index: u32,
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
}

impl Observation {
    /// Checks the bounds and widget-id invariants.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for w in &self.widgets {
            if !w.bounds.within_screen() {
                return Err(format!("widget {} lies outside the virtual screen", w.widget_id));
            }
            if !seen.insert(w.widget_id.as_str()) {
                return Err(format!("duplicate widget id {}", w.widget_id));
            }
        }
        Ok(())
    }

    /// Topmost widget containing the point (later widgets are drawn on top).
    pub fn hit_test(&self, x: i32, y: i32) -> Option<&Widget> {
        self.widgets.iter().rev().find(|w| w.bounds.contains(x, y))
    }

    pub fn focused_field(&self) -> Option<&Widget> {
        self.widgets
            .iter()
            .find(|w| w.kind == WidgetKind::TextField && w.focused)
    }

    /// The part of the screen id after the last `/`, e.g. `main` for `notes/main`.
    pub fn screen_kind(&self) -> &str {
        self.screen_id.rsplit('/').next().unwrap_or(&self.screen_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDirection {
    pub const ALL: [ScrollDirection; 4] = [
        ScrollDirection::Up,
        ScrollDirection::Down,
        ScrollDirection::Left,
        ScrollDirection::Right,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    LongPress,
    Type,
    Scroll,
    PressHome,
    PressBack,
    OpenApp,
    Finished,
    Answer,
}

impl ActionKind {
    pub const ALL: [ActionKind; 9] = [
        ActionKind::Click,
        ActionKind::LongPress,
        ActionKind::Type,
        ActionKind::Scroll,
        ActionKind::PressHome,
        ActionKind::PressBack,
        ActionKind::OpenApp,
        ActionKind::Finished,
        ActionKind::Answer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ActionKind::Finished | ActionKind::Answer)
    }
}

/// Mobile-agent action. JSON form: `{"kind": "click", "x": 10, "y": 20}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Click { x: i32, y: i32 },
    LongPress { x: i32, y: i32 },
    Type { content: String },
    Scroll { direction: ScrollDirection },
    PressHome,
    PressBack,
    OpenApp { app: String },
    Finished {
        #[serde(default)]
        content: String,
    },
    Answer { content: String },
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::LongPress { .. } => ActionKind::LongPress,
            Action::Type { .. } => ActionKind::Type,
            Action::Scroll { .. } => ActionKind::Scroll,
            Action::PressHome => ActionKind::PressHome,
            Action::PressBack => ActionKind::PressBack,
            Action::OpenApp { .. } => ActionKind::OpenApp,
            Action::Finished { .. } => ActionKind::Finished,
            Action::Answer { .. } => ActionKind::Answer,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Action::Click { x, y } | Action::LongPress { x, y } => {
                if (0..SCREEN_WIDTH).contains(x) && (0..SCREEN_HEIGHT).contains(y) {
                    Ok(())
                } else {
                    Err(format!("coordinates ({x}, {y}) outside the virtual screen"))
                }
            }
            _ => Ok(()),
        }
    }
}

/// 32-byte SHA-256 digest, hex-encoded in JSON.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateDigest(pub [u8; 32]);

impl StateDigest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let out = Sha256::digest(bytes);
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        StateDigest(d)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self, String> {
        if s.len() != 64 {
            return Err(format!("digest must be 64 hex chars, got {}", s.len()));
        }
        let mut d = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair = std::str::from_utf8(chunk).map_err(|e| e.to_string())?;
            d[i] = u8::from_str_radix(pair, 16).map_err(|e| e.to_string())?;
        }
        Ok(StateDigest(d))
    }
}

impl fmt::Debug for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateDigest({})", &self.to_hex()[..12])
    }
}

impl Serialize for StateDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for StateDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        StateDigest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn digest_observation(obs: &Observation) -> StateDigest {
    StateDigest::of_bytes(&serde_json::to_vec(obs).expect("observation serializes"))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub observation_digest: StateDigest,
    pub action: Action,
}

/// Current observation plus a bounded window of past (observation, action)
/// pairs, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub observation: Observation,
    pub history: VecDeque<HistoryEntry>,
    pub instruction: String,
    pub window: usize,
}

impl AgentState {
    pub fn new(instruction: impl Into<String>, observation: Observation, window: usize) -> Self {
        AgentState {
            observation,
            history: VecDeque::with_capacity(window),
            instruction: instruction.into(),
            window,
        }
    }

    /// Records `action` taken in the current observation and moves to `next`.
    pub fn advance(&mut self, action: Action, next: Observation) {
        if self.window > 0 {
            if self.history.len() == self.window {
                self.history.pop_front();
            }
            self.history.push_back(HistoryEntry {
                observation_digest: digest_observation(&self.observation),
                action,
            });
        }
        self.observation = next;
    }

    pub fn last_action(&self) -> Option<&Action> {
        self.history.back().map(|h| &h.action)
    }
}

/// Collision-resistant digest of the full agent state.
pub fn digest_state(state: &AgentState) -> StateDigest {
    StateDigest::of_bytes(&serde_json::to_vec(state).expect("agent state serializes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state_digest: StateDigest,
    pub token_ids: Vec<u32>,
    pub token_logprobs_behavior: Vec<f64>,
    pub action: Action,
}

/// How a rollout ended from the collector's point of view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Complete,
    Truncated,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: Context,
    pub steps: Vec<TrajectoryStep>,
    /// Reward used for training (rule script or judge, per env config).
    pub terminal_reward: u8,
    pub truncated: bool,
    /// Environment latency per step, milliseconds.
    pub wall_times: Vec<f64>,
    /// Rule-based reward, when the training reward came from another source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_reward: Option<u8>,
}

impl Trajectory {
    pub fn validate(&self, step_cap: usize) -> Result<(), String> {
        if self.steps.len() > step_cap {
            return Err(format!("{} steps exceed cap {}", self.steps.len(), step_cap));
        }
        if self.terminal_reward > 1 {
            return Err(format!("terminal reward {} not in {{0,1}}", self.terminal_reward));
        }
        if self.truncated && self.terminal_reward != 0 {
            return Err("truncated trajectory carries a nonzero reward".into());
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.token_ids.len() != s.token_logprobs_behavior.len() {
                return Err(format!("step {i}: token/logprob length mismatch"));
            }
        }
        if self.wall_times.len() != self.steps.len() {
            return Err("wall_times length differs from steps".into());
        }
        Ok(())
    }

    /// Rule-based outcome: `true_reward` when present, else `terminal_reward`.
    pub fn rule_reward(&self) -> u8 {
        self.true_reward.unwrap_or(self.terminal_reward)
    }

    /// Per-step rewards are zero except the last, which carries the terminal reward.
    pub fn step_rewards(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.steps.len()];
        if let Some(last) = r.last_mut() {
            *last = f64::from(self.terminal_reward);
        }
        r
    }
}
