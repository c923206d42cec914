//! Synthetic patients and the inquiry environment they answer.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{DiseaseEntry, FindingKind, Flavor, KnowledgeBase};
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("simulator expects a {expected:?} knowledge base")]
    WrongFlavor { expected: Flavor },
    #[error("disease {id} ({name}) has no linked symptoms to self-report")]
    NoSymptoms { id: usize, name: String },
    #[error("finding id {id} out of range for {n} findings")]
    FindingOutOfRange { id: usize, n: usize },
    #[error("poisson mean {0} must be positive and finite")]
    BadMean(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Positive,
    Negative,
}

impl Feedback {
    pub fn encoded(self) -> i8 {
        match self {
            Feedback::Positive => 1,
            Feedback::Negative => -1,
        }
    }
}

/// Demographics of a simulated patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientContext {
    pub sex: bool,
    pub age_range: usize,
}

impl PatientContext {
    /// Sex bit followed by a one-hot age-range block.
    pub fn encode(&self, n_age_ranges: usize) -> Vec<u8> {
        let mut bits = vec![0u8; 1 + n_age_ranges];
        bits[0] = u8::from(self.sex);
        bits[1 + self.age_range] = 1;
        bits
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    #[serde(rename = "disease")]
    pub true_disease: usize,
    pub positives: BTreeSet<usize>,
    pub self_reports: BTreeSet<usize>,
    pub context: Option<PatientContext>,
}

impl Patient {
    pub fn respond(&self, finding: usize) -> Feedback {
        respond(self, finding)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("patient serializes")
    }
}

/// Findings block over {-1, 0, +1} plus an optional 0/1 context block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateVector {
    pub findings: Vec<i8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<u8>,
}

impl StateVector {
    pub fn empty(n: usize, context: Vec<u8>) -> Self {
        Self {
            findings: vec![0; n],
            context,
        }
    }

    pub fn len(&self) -> usize {
        self.findings.len() + self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set(&mut self, finding: usize, feedback: Feedback) {
        self.findings[finding] = feedback.encoded();
    }

    pub fn is_known(&self, finding: usize) -> bool {
        self.findings[finding] != 0
    }

    /// Real-valued network input.
    pub fn to_input(&self) -> Vec<f64> {
        self.findings
            .iter()
            .map(|&v| f64::from(v))
            .chain(self.context.iter().map(|&b| f64::from(b)))
            .collect()
    }
}

/// Builds a state from known feedback and optional context bits.
pub fn encode_state(
    known: &BTreeMap<usize, Feedback>,
    context: Option<&[u8]>,
    n: usize,
) -> Result<StateVector, SimError> {
    let mut state = StateVector::empty(n, context.map(<[u8]>::to_vec).unwrap_or_default());
    for (&id, &fb) in known {
        if id >= n {
            return Err(SimError::FindingOutOfRange { id, n });
        }
        state.set(id, fb);
    }
    Ok(state)
}

pub fn respond(patient: &Patient, finding: usize) -> Feedback {
    if patient.positives.contains(&finding) {
        Feedback::Positive
    } else {
        Feedback::Negative
    }
}

/// Initial state `s_0`: self-reports marked positive, context appended.
pub fn initial_state(patient: &Patient, kb: &KnowledgeBase) -> StateVector {
    let context = match (kb.has_context(), patient.context) {
        (true, Some(ctx)) => ctx.encode(kb.age_ranges.len()),
        _ => Vec::new(),
    };
    let mut state = StateVector::empty(kb.n_findings(), context);
    for &f in &patient.self_reports {
        state.set(f, Feedback::Positive);
    }
    state
}

/// Poisson means of the set-valued procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub symptom_poisson_mean: f64,
    pub exam_poisson_mean: f64,
    pub self_report_poisson_mean: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            symptom_poisson_mean: 6.5,
            exam_poisson_mean: 5.3,
            self_report_poisson_mean: 2.9,
        }
    }
}

fn sample_context(kb: &KnowledgeBase, disease: &DiseaseEntry, rng: &mut Rng) -> Option<PatientContext> {
    if !kb.has_context() {
        return None;
    }
    let prior = disease.context_prior.as_ref()?;
    let sex = rng.random::<f64>() < prior.sex_probability;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut age_range = prior.age_range_probabilities.len() - 1;
    for (i, p) in prior.age_range_probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            age_range = i;
            break;
        }
    }
    Some(PatientContext { sex, age_range })
}

fn no_symptoms(disease: &DiseaseEntry) -> SimError {
    SimError::NoSymptoms {
        id: disease.id,
        name: disease.name.clone(),
    }
}

/// Bernoulli procedure: uniform disease, one independent trial per linked
/// finding (redrawn until at least one symptom is positive), one positive
/// symptom picked uniformly as the self-report.
pub fn simulate_probabilistic(kb: &KnowledgeBase, rng: &mut Rng) -> Result<Patient, SimError> {
    if kb.flavor != Flavor::Probabilistic {
        return Err(SimError::WrongFlavor {
            expected: Flavor::Probabilistic,
        });
    }
    let disease = &kb.diseases[rng.random_range(0..kb.n_diseases())];
    if !disease
        .findings
        .iter()
        .any(|l| kb.findings[l.finding_id].kind == FindingKind::Symptom)
    {
        return Err(no_symptoms(disease));
    }
    let (positives, symptoms) = loop {
        let mut positives = BTreeSet::new();
        for link in &disease.findings {
            let p = link.probability.unwrap_or(1.0);
            if rng.random::<f64>() < p {
                positives.insert(link.finding_id);
            }
        }
        let symptoms: Vec<usize> = positives
            .iter()
            .copied()
            .filter(|&f| kb.findings[f].kind == FindingKind::Symptom)
            .collect();
        if !symptoms.is_empty() {
            break (positives, symptoms);
        }
    };
    let self_report = symptoms[rng.random_range(0..symptoms.len())];
    let context = sample_context(kb, disease, rng);
    Ok(Patient {
        true_disease: disease.id,
        positives,
        self_reports: BTreeSet::from([self_report]),
        context,
    })
}

fn poisson(mean: f64) -> Result<Poisson<f64>, SimError> {
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(SimError::BadMean(mean));
    }
    Poisson::new(mean).map_err(|_| SimError::BadMean(mean))
}

/// Poisson draw clamped into `[lo, hi]`.
fn clamped_count(dist: &Poisson<f64>, lo: usize, hi: usize, rng: &mut Rng) -> usize {
    let k = dist.sample(rng) as usize;
    k.clamp(lo, hi)
}

fn choose(pool: &[usize], k: usize, rng: &mut Rng) -> BTreeSet<usize> {
    index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Poisson procedure: uniform disease; symptom count ~ Poisson clamped to
/// `[1, #symptom links]`; examination count ~ Poisson clamped to
/// `[0, #exam links]`; self-report count ~ Poisson clamped to
/// `[1, #positive symptoms]`, drawn from the positive symptoms only.
pub fn simulate_setvalued(kb: &KnowledgeBase, rng: &mut Rng, cfg: &SimConfig) -> Result<Patient, SimError> {
    if kb.flavor != Flavor::SetValued {
        return Err(SimError::WrongFlavor {
            expected: Flavor::SetValued,
        });
    }
    let symptom_dist = poisson(cfg.symptom_poisson_mean)?;
    let exam_dist = poisson(cfg.exam_poisson_mean)?;
    let report_dist = poisson(cfg.self_report_poisson_mean)?;

    let disease = &kb.diseases[rng.random_range(0..kb.n_diseases())];
    let (symptom_links, exam_links): (Vec<usize>, Vec<usize>) = disease
        .findings
        .iter()
        .map(|l| l.finding_id)
        .partition(|&f| kb.findings[f].kind == FindingKind::Symptom);
    if symptom_links.is_empty() {
        return Err(no_symptoms(disease));
    }

    let n_sym = clamped_count(&symptom_dist, 1, symptom_links.len(), rng);
    let symptoms = choose(&symptom_links, n_sym, rng);
    let n_exam = clamped_count(&exam_dist, 0, exam_links.len(), rng);
    let exams = choose(&exam_links, n_exam, rng);

    let symptom_vec: Vec<usize> = symptoms.iter().copied().collect();
    let n_rep = clamped_count(&report_dist, 1, symptom_vec.len(), rng);
    let self_reports = choose(&symptom_vec, n_rep, rng);

    let mut positives = symptoms;
    positives.extend(exams);
    Ok(Patient {
        true_disease: disease.id,
        positives,
        self_reports,
        context: None,
    })
}

/// Dispatches on the knowledge base flavor.
pub fn simulate(kb: &KnowledgeBase, rng: &mut Rng, cfg: &SimConfig) -> Result<Patient, SimError> {
    match kb.flavor {
        Flavor::Probabilistic => simulate_probabilistic(kb, rng),
        Flavor::SetValued => simulate_setvalued(kb, rng, cfg),
    }
}
