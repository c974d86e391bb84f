use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::traffic_sim::StepEvents;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingSign {
    /// Closing in on an evader earns a positive reward.
    ClosingPositive,
    /// `+beta * min(d_next - d_now)`, which penalizes closing in.
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub c1: f64,
    pub c2: f64,
    pub beta: f64,
    pub shaping_sign: ShapingSign,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c1: -0.01,
            c2: 10.0,
            beta: 2.0,
            shaping_sign: ShapingSign::ClosingPositive,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.c1 <= 0.0) {
            return Err(ConfigError::invalid("reward.c1", "step penalty must be <= 0"));
        }
        if !self.c2.is_finite() {
            return Err(ConfigError::invalid("reward.c2", "must be finite"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ConfigError::invalid("reward.beta", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step_penalty: f64,
    pub capture_share: f64,
    pub shaping: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn new(step_penalty: f64, capture_share: f64, shaping: f64) -> Self {
        Self {
            step_penalty,
            capture_share,
            shaping,
            total: step_penalty + capture_share + shaping,
        }
    }
}

/// Smallest per-evader distance change over evaders alive before and after.
pub fn min_distance_change(before: &[(usize, f64)], after: &[(usize, f64)]) -> Option<f64> {
    after
        .iter()
        .filter_map(|&(n, d1)| before.iter().find(|&&(k, _)| k == n).map(|&(_, d0)| d1 - d0))
        .min_by(f64::total_cmp)
}

pub fn individual_reward(m: usize, events: &StepEvents, cfg: &RewardConfig) -> RewardBreakdown {
    let mut captured_now = false;
    let mut capture_share = 0.0;
    for c in &events.captures {
        if c.pursuers.contains(&m) {
            captured_now = true;
            capture_share += cfg.c2 / c.pursuers.len() as f64;
        }
    }
    let step_penalty = if !events.done && !captured_now { cfg.c1 } else { 0.0 };
    let shaping = match min_distance_change(&events.distances_before[m], &events.distances_after[m]) {
        None => 0.0,
        Some(delta) => match cfg.shaping_sign {
            ShapingSign::ClosingPositive => -cfg.beta * delta,
            ShapingSign::PaperLiteral => cfg.beta * delta,
        },
    };
    RewardBreakdown::new(step_penalty, capture_share, shaping)
}

pub fn global_reward(individuals: &[f64]) -> f64 {
    individuals.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic_sim::CaptureEvent;

    fn events(before: Vec<Vec<(usize, f64)>>, after: Vec<Vec<(usize, f64)>>, captures: Vec<CaptureEvent>) -> StepEvents {
        StepEvents {
            captures,
            done: after.iter().all(|d| d.is_empty()),
            distances_before: before,
            distances_after: after,
        }
    }

    #[test]
    fn shared_capture_splits_bonus() {
        let cfg = RewardConfig::default();
        let ev = events(
            vec![vec![(0, 40.0)], vec![(0, 45.0)]],
            vec![vec![], vec![]],
            vec![CaptureEvent {
                evader: 0,
                timestep: 3,
                pursuers: vec![0, 1],
            }],
        );
        for m in 0..2 {
            let r = individual_reward(m, &ev, &cfg);
            assert_eq!(r.capture_share, 5.0);
            assert_eq!(r.step_penalty, 0.0);
            assert_eq!(r.shaping, 0.0);
        }
    }

    #[test]
    fn closing_three_metres_earns_six() {
        let cfg = RewardConfig::default();
        let ev = events(vec![vec![(0, 100.0)]], vec![vec![(0, 97.0)]], vec![]);
        let r = individual_reward(0, &ev, &cfg);
        assert!((r.shaping - 6.0).abs() < 1e-12);
        let literal = RewardConfig {
            shaping_sign: ShapingSign::PaperLiteral,
            ..cfg
        };
        assert!((individual_reward(0, &ev, &literal).shaping + 6.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_step_costs_c1() {
        let cfg = RewardConfig::default();
        let ev = events(vec![vec![(0, 100.0), (1, 50.0)]], vec![vec![(0, 100.0), (1, 50.0)]], vec![]);
        let r = individual_reward(0, &ev, &cfg);
        assert_eq!(r.total, -0.01);
    }

    #[test]
    fn min_is_taken_over_per_evader_changes() {
        // Evader 1 is closer but evader 0 is approached faster.
        let before = [(0, 200.0), (1, 50.0)];
        let after = [(0, 190.0), (1, 52.0)];
        assert_eq!(min_distance_change(&before, &after), Some(-10.0));
        // An evader captured this step drops out of the comparison.
        assert_eq!(min_distance_change(&before, &[(1, 52.0)]), Some(2.0));
    }

    #[test]
    fn global_reward_sums() {
        assert_eq!(global_reward(&[1.0, 2.0, -0.5, 0.0]), 2.5);
        assert_eq!(global_reward(&[0.0; 4]), 0.0);
    }

    #[test]
    fn invalid_config_names_key() {
        let cfg = RewardConfig {
            beta: -1.0,
            ..RewardConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().key, "reward.beta");
    }
}
