//! Composite reward `r = μ·r_p + ν·r_H`.

use serde::{Deserialize, Serialize};

use crate::patient_sim::Feedback;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub query_cost: f64,
    pub negative_discovery_bonus: f64,
    pub positive_discovery_bonus: f64,
    pub correct_diagnosis: f64,
    pub incorrect_or_timeout: f64,
    pub mu: f64,
    pub nu: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            query_cost: -1.0,
            negative_discovery_bonus: 0.7,
            positive_discovery_bonus: 1.7,
            correct_diagnosis: 1.0,
            incorrect_or_timeout: -1.0,
            mu: 1.0,
            nu: 2.5,
        }
    }
}

impl RewardConfig {
    pub fn is_finite(&self) -> bool {
        [
            self.query_cost,
            self.negative_discovery_bonus,
            self.positive_discovery_bonus,
            self.correct_diagnosis,
            self.incorrect_or_timeout,
            self.mu,
            self.nu,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
    Timeout,
}

/// Per-inquiry part of `r_p`: the query cost plus a discovery bonus. Only
/// unknown findings are ever inquired, so every query discovers something.
pub fn step_reward_rp(feedback: Feedback, cfg: &RewardConfig) -> f64 {
    cfg.query_cost
        + match feedback {
            Feedback::Positive => cfg.positive_discovery_bonus,
            Feedback::Negative => cfg.negative_discovery_bonus,
        }
}

pub fn terminal_reward_rp(outcome: Outcome, cfg: &RewardConfig) -> f64 {
    match outcome {
        Outcome::Correct => cfg.correct_diagnosis,
        Outcome::Incorrect | Outcome::Timeout => cfg.incorrect_or_timeout,
    }
}

/// `max((h_prev − h_next) / h0, 0)`; zero when the initial entropy is zero.
pub fn entropy_reward(h_prev: f64, h_next: f64, h0: f64) -> f64 {
    if h0 <= 0.0 {
        return 0.0;
    }
    ((h_prev - h_next) / h0).max(0.0)
}

pub fn combine(rp: f64, rh: f64, cfg: &RewardConfig) -> f64 {
    cfg.mu * rp + cfg.nu * rh
}
