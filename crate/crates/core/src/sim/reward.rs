//! Rule-based reward scripts and the noisy-judge wrapper.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::hashing;

/// App state visible to reward scripts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Store {
    /// item name -> tag
    pub items: BTreeMap<String, String>,
    pub viewed: BTreeSet<String>,
    pub settings: BTreeMap<String, bool>,
    pub forms: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Predicate {
    Viewed { item: String },
    Exists { item: String },
    Absent { item: String },
    SettingOn { setting: String },
    FormSubmitted { item: String, value: String },
    AnswerEquals { truth: String },
}

/// What a script sees at termination.
#[derive(Clone, Debug)]
pub struct FinalState<'a> {
    pub store: &'a Store,
    pub screen_id: &'a str,
    pub answer: Option<&'a str>,
    pub truncated: bool,
}

pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl Predicate {
    pub fn holds(&self, f: &FinalState<'_>) -> bool {
        match self {
            Predicate::Viewed { item } => f.store.viewed.contains(item),
            Predicate::Exists { item } => f.store.items.contains_key(item),
            Predicate::Absent { item } => !f.store.items.contains_key(item),
            Predicate::SettingOn { setting } => f.store.settings.get(setting).copied().unwrap_or(false),
            Predicate::FormSubmitted { item, value } => {
                f.store.forms.iter().any(|(a, b)| a == item && b == value)
            }
            Predicate::AnswerEquals { truth } => {
                f.answer.is_some_and(|a| normalize_answer(a) == normalize_answer(truth))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "script", rename_all = "snake_case")]
pub enum RewardScript {
    Rule { predicates: Vec<Predicate> },
    NoisyJudge { base: Box<RewardScript>, fp_rate: f64, fn_rate: f64, seed: u64 },
}

impl RewardScript {
    /// Binary outcome; `episode_key` identifies the episode for the judge's coin.
    pub fn score(&self, f: &FinalState<'_>, episode_key: u64) -> u8 {
        match self {
            RewardScript::Rule { predicates } => {
                u8::from(!f.truncated && predicates.iter().all(|p| p.holds(f)))
            }
            RewardScript::NoisyJudge { base, fp_rate, fn_rate, seed } => {
                let truth = base.score(f, episode_key);
                let u = hashing::unit_interval(hashing::combine(&[*seed, episode_key, 0x7d6e]));
                match truth {
                    0 if u < *fp_rate => 1,
                    1 if u < *fn_rate => 0,
                    t => t,
                }
            }
        }
    }

    /// The underlying rule script.
    pub fn rule(&self) -> &RewardScript {
        match self {
            RewardScript::Rule { .. } => self,
            RewardScript::NoisyJudge { base, .. } => base.rule(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("judge rates must lie in [0, 1] (fp {fp_rate}, fn {fn_rate})")]
pub struct JudgeRateError {
    pub fp_rate: f64,
    pub fn_rate: f64,
}

pub fn wrap_noisy_judge(script: RewardScript, fp_rate: f64, fn_rate: f64, seed: u64) -> Result<RewardScript, JudgeRateError> {
    if !(0.0..=1.0).contains(&fp_rate) || !(0.0..=1.0).contains(&fn_rate) {
        return Err(JudgeRateError { fp_rate, fn_rate });
    }
    Ok(RewardScript::NoisyJudge { base: Box::new(script), fp_rate, fn_rate, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> Store {
        let mut s = Store::default();
        s.items.insert("budget".into(), "red".into());
        s.settings.insert("sound".into(), true);
        s
    }

    fn fin<'a>(s: &'a Store, answer: Option<&'a str>) -> FinalState<'a> {
        FinalState { store: s, screen_id: "x/main", answer, truncated: false }
    }

    #[test]
    fn predicates() {
        let s = store();
        let f = fin(&s, Some("  RED "));
        assert!(Predicate::Exists { item: "budget".into() }.holds(&f));
        assert!(Predicate::Absent { item: "taxes".into() }.holds(&f));
        assert!(Predicate::SettingOn { setting: "sound".into() }.holds(&f));
        assert!(!Predicate::SettingOn { setting: "backup".into() }.holds(&f));
        assert!(Predicate::AnswerEquals { truth: "red".into() }.holds(&f));
    }

    #[test]
    fn truncation_scores_zero() {
        let s = store();
        let mut f = fin(&s, None);
        f.truncated = true;
        assert_eq!(RewardScript::Rule { predicates: vec![] }.score(&f, 0), 0);
    }

    #[test]
    fn zero_rate_judge_is_identity() {
        let base = RewardScript::Rule { predicates: vec![Predicate::Exists { item: "budget".into() }] };
        let judge = wrap_noisy_judge(base.clone(), 0.0, 0.0, 9).unwrap();
        let s = store();
        let mut empty = Store::default();
        empty.viewed.insert("x".into());
        for key in 0..1000 {
            assert_eq!(judge.score(&fin(&s, None), key), base.score(&fin(&s, None), key));
            assert_eq!(judge.score(&fin(&empty, None), key), base.score(&fin(&empty, None), key));
        }
    }

    #[test]
    fn full_fp_reports_all_failures_as_success() {
        let base = RewardScript::Rule { predicates: vec![Predicate::Exists { item: "nope".into() }] };
        let judge = wrap_noisy_judge(base, 1.0, 0.0, 1).unwrap();
        let s = store();
        let f = fin(&s, None);
        assert!((0..500).all(|k| judge.score(&f, k) == 1));
    }

    #[test]
    fn fp_rate_monte_carlo() {
        let base = RewardScript::Rule { predicates: vec![Predicate::Exists { item: "nope".into() }] };
        let judge = wrap_noisy_judge(base, 0.15, 0.0, 4).unwrap();
        let s = store();
        let f = fin(&s, None);
        let n = 10_000;
        let flips = (0..n).filter(|&k| judge.score(&f, k) == 1).count() as f64 / n as f64;
        assert!((flips - 0.15).abs() <= 0.01, "{flips}");
    }

    #[test]
    fn invalid_rates() {
        let base = RewardScript::Rule { predicates: vec![] };
        assert!(wrap_noisy_judge(base, 1.2, 0.0, 0).is_err());
    }
}
