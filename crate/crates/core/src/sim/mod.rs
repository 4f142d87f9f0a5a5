//! Deterministic mini-app environments.

pub mod env;
pub mod latency;
pub mod reward;
pub mod solver;
pub mod suite;

pub use env::{EnvConfig, EnvError, JudgeConfig, SimEnv, StepOutcome};
pub use latency::{ClockMode, FaultModel, LatencyModel};
pub use reward::{wrap_noisy_judge, RewardScript};
pub use suite::{build_default_suite, Suite, SuiteConfig};
