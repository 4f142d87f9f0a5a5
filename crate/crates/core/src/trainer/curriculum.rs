//! Difficulty curriculum: stages that widen the training pool.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::cmdp::Difficulty;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Enter at this training step.
    Step(u64),
    /// Enter once the mean train success of the previous step reaches this.
    Success(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub difficulties: Vec<Difficulty>,
    pub trigger: Trigger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<Stage>,
}

impl CurriculumSchedule {
    /// Easy, then Easy+Medium at 1/3, then everything at 2/3 of `total`.
    pub fn default_for(total: u64) -> Self {
        use Difficulty::*;
        CurriculumSchedule {
            stages: vec![
                Stage { difficulties: vec![Easy], trigger: Trigger::Step(0) },
                Stage { difficulties: vec![Easy, Medium], trigger: Trigger::Step(total / 3) },
                Stage { difficulties: vec![Easy, Medium, Hard], trigger: Trigger::Step(2 * total / 3) },
            ],
        }
    }

    /// A single stage over every difficulty.
    pub fn flat() -> Self {
        CurriculumSchedule { stages: vec![Stage { difficulties: Difficulty::ALL.to_vec(), trigger: Trigger::Step(0) }] }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let first = self.stages.first().ok_or_else(|| TrainError::Config("curriculum has no stages".into()))?;
        if first.trigger != Trigger::Step(0) {
            return Err(TrainError::Config("first curriculum stage must start at step 0".into()));
        }
        let mut last_step = 0;
        for w in self.stages.windows(2) {
            let widened = w[0].difficulties.iter().all(|d| w[1].difficulties.contains(d)) && w[1].difficulties.len() > w[0].difficulties.len();
            if !widened {
                return Err(TrainError::Config("curriculum stages must strictly widen the task pool".into()));
            }
            if let Trigger::Step(s) = w[1].trigger {
                if s < last_step {
                    return Err(TrainError::Config("curriculum step triggers must not decrease".into()));
                }
                last_step = s;
            }
        }
        Ok(())
    }
}

/// Tracks the active stage during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumState {
    pub stage: usize,
}

impl CurriculumState {
    pub fn new() -> Self {
        CurriculumState { stage: 0 }
    }

    /// Moves through every stage whose trigger has fired before `step`.
    pub fn advance(&mut self, schedule: &CurriculumSchedule, step: u64, last_success: Option<f64>) -> usize {
        while let Some(next) = schedule.stages.get(self.stage + 1) {
            let fire = match next.trigger {
                Trigger::Step(s) => step >= s,
                Trigger::Success(th) => last_success.is_some_and(|v| v >= th),
            };
            if !fire {
                break;
            }
            self.stage += 1;
        }
        self.stage
    }
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self::new()
    }
}
