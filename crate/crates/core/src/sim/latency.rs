//! Per-action latency and fault injection, both deterministic in
//! (episode key, step).

use serde::{Deserialize, Serialize};

use crate::cmdp::ActionKind;
use crate::hashing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Latencies are slept.
    Real,
    /// Latencies are only reported.
    #[default]
    Simulated,
}

/// Delays are given at device scale in milliseconds and divided by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub click_ms: f64,
    pub type_ms: f64,
    pub scroll_ms: f64,
    pub navigate_ms: f64,
    pub terminal_ms: f64,
    /// Uniform multiplicative jitter in [1 - j, 1 + j].
    pub jitter: f64,
    /// Extra wait, uniform in [0, stabilization_ms], when the screen changes.
    pub stabilization_ms: f64,
    pub cap_ms: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            click_ms: 3000.0,
            type_ms: 1500.0,
            scroll_ms: 6000.0,
            navigate_ms: 3000.0,
            terminal_ms: 200.0,
            jitter: 0.2,
            stabilization_ms: 3000.0,
            cap_ms: 12000.0,
            scale: 1000.0,
            seed: 0,
        }
    }
}

impl LatencyModel {
    pub fn zero() -> Self {
        LatencyModel {
            click_ms: 0.0,
            type_ms: 0.0,
            scroll_ms: 0.0,
            navigate_ms: 0.0,
            terminal_ms: 0.0,
            jitter: 0.0,
            stabilization_ms: 0.0,
            cap_ms: 0.0,
            scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.click_ms, self.type_ms, self.scroll_ms, self.navigate_ms, self.terminal_ms, self.stabilization_ms];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("latency delays must be finite and non-negative".into());
        }
        let max_base = all[..5].iter().cloned().fold(0.0, f64::max);
        if self.cap_ms < max_base {
            return Err(format!("latency cap {} below largest base delay {max_base}", self.cap_ms));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err("jitter must lie in [0, 1]".into());
        }
        if !(self.scale > 0.0) {
            return Err("latency scale must be positive".into());
        }
        Ok(())
    }

    pub fn base_ms(&self, kind: ActionKind) -> f64 {
        match kind {
            ActionKind::Click | ActionKind::LongPress => self.click_ms,
            ActionKind::Type => self.type_ms,
            ActionKind::Scroll => self.scroll_ms,
            ActionKind::PressHome | ActionKind::PressBack | ActionKind::OpenApp => self.navigate_ms,
            ActionKind::Finished | ActionKind::Answer => self.terminal_ms,
        }
    }

    /// Scaled latency in milliseconds.
    pub fn sample(&self, kind: ActionKind, screen_changed: bool, episode_key: u64, step: u32) -> f64 {
        let h = hashing::combine(&[self.seed, episode_key, u64::from(step), 0x1a7]);
        let u1 = hashing::unit_interval(h);
        let u2 = hashing::unit_interval(hashing::mix64(h));
        let mut ms = self.base_ms(kind) * (1.0 + self.jitter * (2.0 * u1 - 1.0));
        if screen_changed {
            ms += self.stabilization_ms * u2;
        }
        ms.clamp(0.0, self.cap_ms.max(0.0)) / self.scale
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultModel {
    pub crash_prob: f64,
    pub hang_prob: f64,
    /// Scaled milliseconds.
    pub hang_ms: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultEvent {
    None,
    Crash,
    Hang,
}

impl FaultModel {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("crash_prob", self.crash_prob), ("hang_prob", self.hang_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.hang_ms >= 0.0) {
            return Err("hang_ms must be non-negative".into());
        }
        Ok(())
    }

    pub fn decide(&self, episode_key: u64, step: u32) -> FaultEvent {
        if self.crash_prob == 0.0 && self.hang_prob == 0.0 {
            return FaultEvent::None;
        }
        let u = hashing::unit_interval(hashing::combine(&[self.seed, episode_key, u64::from(step), 0xfa17]));
        if u < self.crash_prob {
            FaultEvent::Crash
        } else if u < self.crash_prob + self.hang_prob {
            FaultEvent::Hang
        } else {
            FaultEvent::None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_nonnegative_and_capped() {
        let m = LatencyModel::default();
        m.validate().unwrap();
        for step in 0..500 {
            for kind in ActionKind::ALL {
                let v = m.sample(kind, step % 2 == 0, 77, step);
                assert!(v >= 0.0 && v <= m.cap_ms / m.scale);
            }
        }
    }

    #[test]
    fn scroll_is_twice_click() {
        let m = LatencyModel::default();
        assert_eq!(m.base_ms(ActionKind::Scroll), 2.0 * m.base_ms(ActionKind::Click));
        assert!(m.base_ms(ActionKind::Type) < m.base_ms(ActionKind::Click));
    }

    #[test]
    fn deterministic() {
        let m = LatencyModel::default();
        assert_eq!(m.sample(ActionKind::Click, true, 5, 3), m.sample(ActionKind::Click, true, 5, 3));
        assert_ne!(m.sample(ActionKind::Click, true, 5, 3), m.sample(ActionKind::Click, true, 5, 4));
    }

    #[test]
    fn bad_configs_rejected() {
        let m = LatencyModel { cap_ms: 10.0, ..Default::default() };
        assert!(m.validate().is_err());
        let f = FaultModel { crash_prob: 1.5, ..Default::default() };
        assert!(f.validate().is_err());
    }

    #[test]
    fn fault_rates() {
        let f = FaultModel { crash_prob: 0.1, hang_prob: 0.05, hang_ms: 1.0, seed: 3 };
        let n = 20_000;
        let crashes = (0..n).filter(|&i| f.decide(i, 0) == FaultEvent::Crash).count() as f64 / n as f64;
        let hangs = (0..n).filter(|&i| f.decide(i, 0) == FaultEvent::Hang).count() as f64 / n as f64;
        assert!((crashes - 0.1).abs() < 0.01);
        assert!((hangs - 0.05).abs() < 0.01);
    }
}
