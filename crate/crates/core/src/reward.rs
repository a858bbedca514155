//! Composite clinical reward.
//!
//! Terminal steps receive only the survival reward `±r_T`. Every other step
//! receives a physiological term on SOFA and lactate changes plus shaping
//! terms that keep glucose and phosphate inside their target ranges. All
//! inputs are raw clinical values, never normalized features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub r_t: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub epsilon: f64,
    pub lambda_g: f64,
    pub lambda_p: f64,
    /// mg/dL
    pub glucose_range: [f64; 2],
    /// mg/dL
    pub phosphate_range: [f64; 2],
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_t: 15.0,
            c0: 0.025,
            c1: 0.125,
            c2: 2.0,
            epsilon: 0.2,
            lambda_g: 1.0,
            lambda_p: 1.0,
            glucose_range: [140.0, 180.0],
            phosphate_range: [2.5, 4.5],
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("r_t", self.r_t),
            ("c0", self.c0),
            ("c1", self.c1),
            ("c2", self.c2),
            ("epsilon", self.epsilon),
            ("lambda_g", self.lambda_g),
            ("lambda_p", self.lambda_p),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("reward.{name} must be >= 0, got {w}")));
            }
        }
        for (name, r) in [("glucose_range", self.glucose_range), ("phosphate_range", self.phosphate_range)] {
            if !(r[0] < r[1]) {
                return Err(Error::Config(format!("reward.{name} needs min < max, got {r:?}")));
            }
        }
        Ok(())
    }

    /// Upper bound on `|R_phys| + |R_bio|` for one non-terminal step, given the
    /// largest pre-step deviation each biomarker can reach.
    pub fn intermediate_bound(&self, max_glucose_dev: f64, max_phosphate_dev: f64) -> f64 {
        let phys = self.c0 + 24.0 * self.c1 + self.c2;
        let bio = self.lambda_g * (2.0 + self.epsilon * max_glucose_dev)
            + self.lambda_p * (2.0 + self.epsilon * max_phosphate_dev);
        phys + bio
    }
}

/// Raw clinical values of the variables the reward reads, at one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVitals {
    pub sofa: f64,
    pub lactate: f64,
    pub glucose: f64,
    pub phosphate: f64,
}

pub fn terminal_reward(died: bool, cfg: &RewardConfig) -> f64 {
    if died {
        -cfg.r_t
    } else {
        cfg.r_t
    }
}

pub fn phys_reward(sofa_t: f64, sofa_t1: f64, lac_t: f64, lac_t1: f64, cfg: &RewardConfig) -> f64 {
    let stagnation = if sofa_t1 == sofa_t && sofa_t > 0.0 { 1.0 } else { 0.0 };
    -cfg.c0 * stagnation - cfg.c1 * (sofa_t1 - sofa_t) - cfg.c2 * (lac_t1 - lac_t).tanh()
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Difference of two logistics: a plateau near 2 inside `range`.
pub fn shaping_f(x: f64, range: [f64; 2]) -> f64 {
    2.0 * logistic(x - range[0]) - 2.0 * logistic(x - range[1])
}

/// Distance outside `range`, in units of the range width.
pub fn deviation(x: f64, range: [f64; 2]) -> f64 {
    let [lo, hi] = range;
    ((x - hi).max(0.0) + (lo - x).max(0.0)) / (hi - lo)
}

pub fn biomarker_reward(x_t: f64, x_t1: f64, range: [f64; 2], epsilon: f64) -> f64 {
    let bonus = (deviation(x_t, range) - deviation(x_t1, range)).max(0.0);
    shaping_f(x_t1, range) + epsilon * bonus
}

pub fn bio_reward(now: &RewardVitals, next: &RewardVitals, cfg: &RewardConfig) -> f64 {
    cfg.lambda_g * biomarker_reward(now.glucose, next.glucose, cfg.glucose_range, cfg.epsilon)
        + cfg.lambda_p
            * biomarker_reward(now.phosphate, next.phosphate, cfg.phosphate_range, cfg.epsilon)
}

/// Reward for one step. `next` is ignored on terminal steps and required otherwise.
pub fn total_reward(
    now: &RewardVitals,
    next: Option<&RewardVitals>,
    terminal: bool,
    died: bool,
    cfg: &RewardConfig,
) -> f64 {
    if terminal {
        return terminal_reward(died, cfg);
    }
    let next = next.expect("non-terminal step needs the next window's values");
    phys_reward(now.sofa, next.sofa, now.lactate, next.lactate, cfg) + bio_reward(now, next, cfg)
}
