//! Core library: contextual-MDP types, task catalogs and benchmark splits,
//! the mini-app simulator, the token policy, rollout orchestration,
//! GRPO/PPO training and evaluation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod catalog;
pub mod fixtures;
pub mod cmdp;
pub mod eval;
pub mod hashing;
pub mod policy;
pub mod rollout;
pub mod scalar;
pub mod sim;
pub mod trainer;

pub use scalar::Scalar;

/// Double-precision policy parameters.
pub type Params64 = policy::PolicyParams<f64>;
/// Single-precision policy parameters.
pub type Params32 = policy::PolicyParams<f32>;
