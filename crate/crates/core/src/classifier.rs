//! Disease classifier: state → disease distribution, entropy and argmax.

use serde::{Deserialize, Serialize};

use crate::nn::{adam_step, softmax_entropy, AdamState, GradientBundle, MlpModel, NnError};
use crate::patient_sim::StateVector;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisPrediction {
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub top_disease: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSample {
    pub state: StateVector,
    pub label: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &MlpModel, state: &StateVector) -> Result<DiagnosisPrediction, NnError> {
    let logits = model.logits(&state.to_input())?;
    let (probs, entropy) = softmax_entropy(&logits);
    let top_disease = argmax(&probs);
    Ok(DiagnosisPrediction {
        probs,
        entropy,
        top_disease,
    })
}

/// Mean cross-entropy over `samples` and its parameter gradient.
pub fn loss_and_gradient(model: &MlpModel, samples: &[ClassifierSample]) -> Result<(f64, GradientBundle), NnError> {
    let mut grads = GradientBundle::zeros_like(model);
    let mut total = 0.0;
    for sample in samples {
        let (logits, cache) = model.forward(&sample.state.to_input())?;
        if sample.label >= logits.len() {
            return Err(NnError::Dimension {
                expected: logits.len(),
                got: sample.label,
            });
        }
        let (mut probs, _) = softmax_entropy(&logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[sample.label];
        probs[sample.label] -= 1.0;
        model.accumulate_backward(&cache, &probs, &mut grads)?;
    }
    let n = samples.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// The classifier network with its optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub model: MlpModel,
    pub adam: AdamState,
}

impl Classifier {
    pub fn new(model: MlpModel) -> Self {
        let adam = AdamState::new(&model);
        Self { model, adam }
    }

    pub fn glorot(layer_dims: &[usize], rng: &mut Rng) -> Result<Self, NnError> {
        Ok(Self::new(MlpModel::glorot(layer_dims, rng)?))
    }

    pub fn n_diseases(&self) -> usize {
        self.model.output_dim()
    }

    pub fn predict(&self, state: &StateVector) -> Result<DiagnosisPrediction, NnError> {
        predict(&self.model, state)
    }

    /// One Adam step on the batch's mean cross-entropy; returns the loss
    /// before the step.
    pub fn fit_batch(&mut self, samples: &[ClassifierSample], lr: f64) -> Result<f64, NnError> {
        if samples.is_empty() {
            return Err(NnError::Dimension { expected: 1, got: 0 });
        }
        let (loss, grads) = loss_and_gradient(&self.model, samples)?;
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        adam_step(&mut self.model, &grads, &mut self.adam, lr)?;
        Ok(loss)
    }
}
