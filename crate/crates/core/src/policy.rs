//! Symptom-inquiry policy: masked action distribution, sampling, and the
//! entropy-regularized REINFORCE update.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::argmax;
use crate::nn::{adam_step, AdamState, GradientBundle, MlpModel, NnError};
use crate::patient_sim::StateVector;
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("every finding is masked; nothing left to inquire")]
    Exhausted,
    #[error("empty training batch")]
    EmptyBatch,
    #[error("non-finite policy objective")]
    NonFiniteObjective,
    #[error("action {0} is masked")]
    MaskedAction(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `true` marks an inquirable finding: unknown in `state` and not yet asked.
pub fn inquiry_mask(state: &StateVector, asked: &[bool]) -> Vec<bool> {
    state
        .findings
        .iter()
        .zip(asked)
        .map(|(&v, &a)| v == 0 && !a)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Softmax over the unmasked logits; masked entries get exactly zero. Also
/// returns the distribution's entropy.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<(Vec<f64>, f64), PolicyError> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::Exhausted);
    }
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let entropy = -probs
        .iter()
        .zip(logits)
        .zip(mask)
        .map(|((&p, &z), &m)| if m && p > 0.0 { p * (z - max - log_sum) } else { 0.0 })
        .sum::<f64>();
    Ok((probs, entropy.max(0.0)))
}

pub fn action_distribution(model: &MlpModel, state: &StateVector, mask: &[bool]) -> Result<ActionDistribution, PolicyError> {
    let logits = model.logits(&state.to_input())?;
    let (probs, _) = masked_softmax(&logits, mask)?;
    Ok(ActionDistribution {
        probs,
        mask: mask.to_vec(),
    })
}

/// Inverse-CDF draw. Falls back to the last unmasked action when rounding
/// leaves the cumulative sum just short of the uniform draw.
pub fn sample_action(dist: &ActionDistribution, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&p, &m)) in dist.probs.iter().zip(&dist.mask).enumerate() {
        if !m {
            continue;
        }
        last = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Most probable unmasked action, lowest id on ties.
pub fn greedy_action(dist: &ActionDistribution) -> usize {
    let masked: Vec<f64> = dist
        .probs
        .iter()
        .zip(&dist.mask)
        .map(|(&p, &m)| if m { p } else { f64::NEG_INFINITY })
        .collect();
    argmax(&masked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub state_before: StateVector,
    pub action: usize,
    pub reward: f64,
    /// Discounted reward-to-go from this transition.
    #[serde(rename = "return")]
    pub return_: f64,
    pub mask_before: Vec<bool>,
}

/// `R_t = Σ_{k≥t} γ^{k−t} r_k`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        returns[i] = acc;
    }
    returns
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyObjective {
    /// Mean of `(R − baseline)·log π(a|s) + β·H(π(·|s))`.
    pub objective: f64,
    pub mean_return: f64,
    pub mean_entropy: f64,
    /// Gradient of `objective` (ascent direction).
    pub gradient: GradientBundle,
}

/// Evaluates the batch objective and its exact gradient.
pub fn objective_gradient(
    model: &MlpModel,
    batch: &[TransitionSample],
    beta: f64,
    baseline: f64,
) -> Result<PolicyObjective, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut gradient = GradientBundle::zeros_like(model);
    let (mut objective, mut ret, mut ent) = (0.0, 0.0, 0.0);
    for t in batch {
        if !t.mask_before.get(t.action).copied().unwrap_or(false) {
            return Err(PolicyError::MaskedAction(t.action));
        }
        let (logits, cache) = model.forward(&t.state_before.to_input())?;
        let (probs, entropy) = masked_softmax(&logits, &t.mask_before)?;
        let advantage = t.return_ - baseline;
        let log_p = probs[t.action].ln();
        objective += advantage * log_p + beta * entropy;
        ret += t.return_;
        ent += entropy;

        let grad_logits: Vec<f64> = probs
            .iter()
            .zip(&t.mask_before)
            .enumerate()
            .map(|(i, (&p, &m))| {
                if !m {
                    return 0.0;
                }
                let score = if i == t.action { 1.0 - p } else { -p };
                let entropy_grad = if p > 0.0 { -p * (p.ln() + entropy) } else { 0.0 };
                advantage * score + beta * entropy_grad
            })
            .collect();
        model.accumulate_backward(&cache, &grad_logits, &mut gradient)?;
    }
    let n = batch.len() as f64;
    gradient.scale(1.0 / n);
    Ok(PolicyObjective {
        objective: objective / n,
        mean_return: ret / n,
        mean_entropy: ent / n,
        gradient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDiagnostics {
    pub mean_return: f64,
    pub policy_entropy: f64,
    pub objective: f64,
}

/// The inquiry network with its optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub model: MlpModel,
    pub adam: AdamState,
}

impl Policy {
    pub fn new(model: MlpModel) -> Self {
        let adam = AdamState::new(&model);
        Self { model, adam }
    }

    pub fn glorot(layer_dims: &[usize], rng: &mut Rng) -> Result<Self, NnError> {
        Ok(Self::new(MlpModel::glorot(layer_dims, rng)?))
    }

    pub fn distribution(&self, state: &StateVector, mask: &[bool]) -> Result<ActionDistribution, PolicyError> {
        action_distribution(&self.model, state, mask)
    }

    /// One Adam ascent step on the entropy-regularized score-function
    /// objective.
    pub fn reinforce_update(
        &mut self,
        batch: &[TransitionSample],
        lr: f64,
        beta: f64,
        baseline: f64,
    ) -> Result<PolicyDiagnostics, PolicyError> {
        let mut obj = objective_gradient(&self.model, batch, beta, baseline)?;
        if !obj.objective.is_finite() {
            return Err(PolicyError::NonFiniteObjective);
        }
        obj.gradient.scale(-1.0);
        adam_step(&mut self.model, &obj.gradient, &mut self.adam, lr)?;
        Ok(PolicyDiagnostics {
            mean_return: obj.mean_return,
            policy_entropy: obj.mean_entropy,
            objective: obj.objective,
        })
    }
}
