//! Per-disease entropy thresholds `K_d` and the stopping rule.
//!
//! An episode stops once the classifier's entropy falls strictly below the
//! threshold of the currently predicted disease. In adaptive mode each
//! threshold tracks the final entropy of correctly diagnosed episodes by a
//! Polyak average, gated so that changes smaller than `epsilon` are skipped.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("per-disease init has {got} values for {expected} diseases")]
    Length { expected: usize, got: usize },
    #[error("invalid threshold parameter: {0}")]
    Parameter(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdInit {
    Uniform(f64),
    PerDisease(Vec<f64>),
    Random { low: f64, high: f64, seed: u64 },
}

impl Default for ThresholdInit {
    fn default() -> Self {
        ThresholdInit::Uniform(1.0)
    }
}

impl ThresholdInit {
    pub fn values(&self, n_diseases: usize) -> Result<Vec<f64>, ThresholdError> {
        let values = match self {
            ThresholdInit::Uniform(k) => vec![*k; n_diseases],
            ThresholdInit::PerDisease(v) => {
                if v.len() != n_diseases {
                    return Err(ThresholdError::Length {
                        expected: n_diseases,
                        got: v.len(),
                    });
                }
                v.clone()
            }
            ThresholdInit::Random { low, high, seed } => {
                if !(low <= high) {
                    return Err(ThresholdError::Parameter(format!("random range [{low}, {high}]")));
                }
                let mut rng = seeded(*seed);
                (0..n_diseases).map(|_| rng.random_range(*low..=*high)).collect()
            }
        };
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ThresholdError::Parameter("initial thresholds must be finite and >= 0".into()));
        }
        Ok(values)
    }

    pub fn label(&self) -> String {
        match self {
            ThresholdInit::Uniform(k) => format!("uniform {k}"),
            ThresholdInit::PerDisease(_) => "per-disease".into(),
            ThresholdInit::Random { low, high, seed } => format!("random [{low}, {high}] seed {seed}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Adaptive,
    /// One shared threshold; may be `+inf` to stop after the first inquiry.
    Fixed(#[serde(with = "extended_f64")] f64),
}

/// Serializes non-finite values as strings so they survive JSON and TOML.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Number(*v).serialize(s)
        } else if v.is_nan() {
            Repr::Text("nan".into()).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

/// Record of one gated update attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdUpdate {
    pub disease: usize,
    pub before: f64,
    pub after: f64,
    pub mean_final_entropy: f64,
    pub group_size: usize,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub values: Vec<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub init: ThresholdInit,
    pub mode: ThresholdMode,
}

impl ThresholdTable {
    pub fn new(
        n_diseases: usize,
        init: ThresholdInit,
        lambda: f64,
        epsilon: f64,
        mode: ThresholdMode,
    ) -> Result<Self, ThresholdError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ThresholdError::Parameter(format!("lambda {lambda} outside [0, 1]")));
        }
        if !(epsilon >= 0.0) {
            return Err(ThresholdError::Parameter(format!("epsilon {epsilon} is negative")));
        }
        Ok(Self {
            values: init.values(n_diseases)?,
            lambda,
            epsilon,
            init,
            mode,
        })
    }

    /// Defaults: every disease starts at 1, λ = 0.99, ε = 0.01, adaptive.
    pub fn with_defaults(n_diseases: usize) -> Self {
        Self::new(n_diseases, ThresholdInit::default(), 0.99, 0.01, ThresholdMode::Adaptive)
            .expect("default parameters are valid")
    }

    pub fn is_adaptive(&self) -> bool {
        self.mode == ThresholdMode::Adaptive
    }

    /// The threshold the stopping rule compares against for `disease`.
    pub fn threshold_for(&self, disease: usize) -> f64 {
        match self.mode {
            ThresholdMode::Adaptive => self.values[disease],
            ThresholdMode::Fixed(k) => k,
        }
    }

    pub fn should_stop(&self, entropy: f64, predicted_disease: usize) -> bool {
        entropy < self.threshold_for(predicted_disease)
    }

    /// Gated Polyak step towards `mean_final_entropy`. Returns whether the
    /// value changed; fixed mode never changes anything.
    pub fn update_threshold(&mut self, disease: usize, mean_final_entropy: f64) -> bool {
        if !self.is_adaptive() {
            return false;
        }
        let k = self.values[disease];
        if (k - mean_final_entropy).abs() > self.epsilon {
            self.values[disease] = self.lambda * k + (1.0 - self.lambda) * mean_final_entropy;
            true
        } else {
            false
        }
    }

    /// Groups correct episodes by diagnosed disease and applies one update
    /// per disease with the group's mean final entropy.
    pub fn batch_update(&mut self, correct_episodes: &[(usize, f64)]) -> Vec<ThresholdUpdate> {
        if !self.is_adaptive() {
            return Vec::new();
        }
        let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &(disease, entropy) in correct_episodes {
            let entry = groups.entry(disease).or_insert((0.0, 0));
            entry.0 += entropy;
            entry.1 += 1;
        }
        groups
            .into_iter()
            .map(|(disease, (sum, count))| {
                let mean = sum / count as f64;
                let before = self.values[disease];
                let applied = self.update_threshold(disease, mean);
                ThresholdUpdate {
                    disease,
                    before,
                    after: self.values[disease],
                    mean_final_entropy: mean,
                    group_size: count,
                    applied,
                }
            })
            .collect()
    }

    /// Sequential per-episode updates, for comparison with batch semantics.
    pub fn sequential_update(&mut self, correct_episodes: &[(usize, f64)]) -> Vec<ThresholdUpdate> {
        correct_episodes
            .iter()
            .map(|&(disease, entropy)| {
                let before = self.values[disease];
                let applied = self.update_threshold(disease, entropy);
                ThresholdUpdate {
                    disease,
                    before,
                    after: self.values[disease],
                    mean_final_entropy: entropy,
                    group_size: 1,
                    applied,
                }
            })
            .collect()
    }

    /// Statistics of the thresholds the stopping rule actually uses.
    pub fn summary(&self) -> ThresholdSummary {
        match self.mode {
            ThresholdMode::Adaptive => ThresholdSummary::from_values(&self.values),
            ThresholdMode::Fixed(k) => ThresholdSummary {
                mean: k,
                std: 0.0,
                median: k,
                values: vec![k; self.values.len()],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub values: Vec<f64>,
}

impl ThresholdSummary {
    /// Population standard deviation; median averages the middle pair.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
        let var = if values.is_empty() {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            len if len % 2 == 1 => sorted[len / 2],
            len => 0.5 * (sorted[len / 2 - 1] + sorted[len / 2]),
        };
        Self {
            mean,
            std: var.sqrt(),
            median,
            values: values.to_vec(),
        }
    }
}
