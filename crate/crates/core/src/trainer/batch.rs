//! Training batches built from collected rollouts.

use crate::cmdp::{AgentState, Context, RolloutStatus};
use crate::rollout::RolloutRecord;

use super::TrainError;

/// One surviving rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub states: Vec<AgentState>,
    pub tokens: Vec<Vec<u32>>,
    /// Training reward in {0, 1}.
    pub reward: f64,
    /// Rule-script reward, for logging.
    pub true_reward: f64,
    pub version: u64,
}

impl Member {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub context: Context,
    pub members: Vec<Member>,
    /// Rollouts dropped because their environment failed.
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    pub groups: Vec<Group>,
    pub behavior_version: u64,
}

impl GroupBatch {
    /// Groups records by plan group; failed rollouts are dropped and the
    /// group shrinks. Empty groups are removed.
    pub fn from_records(contexts: &[Context], records: &[RolloutRecord], behavior_version: u64) -> GroupBatch {
        let mut groups: Vec<Group> = contexts.iter().map(|c| Group { context: c.clone(), members: Vec::new(), dropped: 0 }).collect();
        for r in records {
            let g = &mut groups[r.group];
            if r.status == RolloutStatus::Failed {
                g.dropped += 1;
                continue;
            }
            g.members.push(Member {
                states: r.states.clone(),
                tokens: r.trajectory.steps.iter().map(|s| s.token_ids.clone()).collect(),
                reward: f64::from(r.trajectory.terminal_reward),
                true_reward: f64::from(r.trajectory.rule_reward()),
                version: r.policy_version,
            });
        }
        groups.retain(|g| !g.members.is_empty());
        GroupBatch { groups, behavior_version }
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.groups.iter().flat_map(|g| g.members.iter())
    }

    pub fn total_timesteps(&self) -> usize {
        self.members().map(|m| m.len()).sum()
    }

    /// Every member was sampled by `version` and the batch says so.
    pub fn check_on_policy(&self, version: u64) -> Result<(), TrainError> {
        if self.behavior_version != version {
            return Err(TrainError::OnPolicy { expected: version, got: self.behavior_version });
        }
        if let Some(m) = self.members().find(|m| m.version != version) {
            return Err(TrainError::OnPolicy { expected: version, got: m.version });
        }
        for m in self.members() {
            if !(m.reward == 0.0 || m.reward == 1.0) {
                return Err(TrainError::Numerics(format!("reward {} not in {{0,1}}", m.reward)));
            }
        }
        Ok(())
    }
}
