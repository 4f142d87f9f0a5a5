//! GRPO and PPO training over collected rollout groups, plus few-shot
//! adaptation.

pub mod advantage;
pub mod batch;
pub mod bc;
pub mod curriculum;
pub mod grpo;
pub mod optim;
pub mod ppo;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{DEFAULT_HISTORY_WINDOW, DEFAULT_STEP_CAP};
use crate::policy::MaskError;
use crate::rollout::{CollectError, CollectMode};

pub use advantage::{compute_advantages, gae, SIGMA_GUARD};
pub use batch::{Group, GroupBatch, Member};
pub use bc::{behavior_clone, demonstration, warm_start, BcConfig, Demo};
pub use curriculum::{CurriculumSchedule, CurriculumState, Stage, Trigger};
pub use grpo::{clipped_surrogate, grpo_loss_and_grad, Diagnostics, GrpoConfig, LossAndGrad, RatioMode};
pub use optim::{adam_update, lr_at, AdamConfig, AdamState};
pub use ppo::{ppo_loss_and_grad, ppo_targets, PpoConfig, PpoLossAndGrad, PpoTargets, ValueHead};
pub use run::{adapt_few_shot, load_params, save_params, train, AdaptStrategy, Adapted, Checkpoint, StepMetrics, TrainRun};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("behavior policy version {got} does not match the old policy version {expected}")]
    OnPolicy { expected: u64, got: u64 },
    #[error("numerics: {0}")]
    Numerics(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no adapted checkpoint for app `{0}`")]
    Routing(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("rollout collection failed: {0}")]
    Collect(#[from] CollectError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Grpo,
    Ppo,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Grpo => "grpo",
            Algo::Ppo => "ppo",
        })
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "ppo" => Ok(Algo::Ppo),
            _ => Err(format!("unknown algorithm `{s}` (grpo, ppo)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algo: Algo,
    pub group_size: usize,
    pub contexts_per_step: usize,
    pub total_steps: u64,
    /// Gradient steps on each collected batch.
    pub updates_per_step: usize,
    pub grpo: GrpoConfig,
    pub ppo: PpoConfig,
    pub adam: AdamConfig,
    pub step_cap: usize,
    pub temperature: f64,
    /// None: easy, easy+medium, all at 1/3 and 2/3 of the run.
    pub curriculum: Option<CurriculumSchedule>,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub collect_mode: CollectMode,
    pub inference_batch_max: usize,
    pub linger_ms: f64,
    pub history_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algo::Grpo,
            group_size: 8,
            contexts_per_step: 2,
            total_steps: 500,
            updates_per_step: 1,
            grpo: GrpoConfig::default(),
            ppo: PpoConfig::default(),
            adam: AdamConfig::default(),
            step_cap: DEFAULT_STEP_CAP,
            temperature: 1.0,
            curriculum: None,
            checkpoint_every: 50,
            seed: 0,
            collect_mode: CollectMode::Async,
            inference_batch_max: 16,
            linger_ms: 0.002,
            history_window: DEFAULT_HISTORY_WINDOW,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CurriculumSchedule {
        self.curriculum.clone().unwrap_or_else(|| CurriculumSchedule::default_for(self.total_steps))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.grpo.clip_eps <= 0.0 || self.ppo.clip_eps <= 0.0 {
            return bad("clip epsilon must be positive");
        }
        if self.grpo.kl_beta < 0.0 {
            return bad("KL coefficient must be non-negative");
        }
        if self.adam.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if self.group_size == 0 || self.contexts_per_step == 0 || self.updates_per_step == 0 {
            return bad("group_size, contexts_per_step and updates_per_step must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.adam.lr_max >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("optimizer settings out of range");
        }
        if self.step_cap == 0 {
            return bad("step_cap must be at least 1");
        }
        self.schedule().validate()
    }
}
