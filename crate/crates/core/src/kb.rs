//! Disease-finding knowledge bases.
//!
//! Two flavors share one file format. `Probabilistic` bases carry an
//! occurrence probability on every disease-finding link; `SetValued` bases
//! only record which findings belong to a disease. Symptoms and examinations
//! live in one dense finding index and are told apart by [`FindingKind`].

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance on the sum of a disease's age-range probabilities.
pub const AGE_PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("failed to read or write knowledge base: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed knowledge base file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid knowledge base: {0}")]
    Invalid(ValidationReport),
    #[error("invalid toy generator spec: {0}")]
    BadSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Symptom,
    Examination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub id: usize,
    pub name: String,
    pub kind: FindingKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingLink {
    pub finding_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

/// Demographic prior of a disease: probability that the sex bit is set and
/// a distribution over the knowledge base's age ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPrior {
    pub sex_probability: f64,
    pub age_range_probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseEntry {
    pub id: usize,
    pub name: String,
    pub findings: Vec<FindingLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_prior: Option<ContextPrior>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Probabilistic,
    SetValued,
}

/// Inclusive age interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeRange {
    pub min: u32,
    pub max: u32,
}

impl AgeRange {
    pub fn contains(&self, age: u32) -> bool {
        self.min <= age && age <= self.max
    }
}

/// The five ranges used by generated fixtures.
pub fn default_age_ranges() -> Vec<AgeRange> {
    vec![
        AgeRange { min: 0, max: 17 },
        AgeRange { min: 18, max: 34 },
        AgeRange { min: 35, max: 49 },
        AgeRange { min: 50, max: 64 },
        AgeRange { min: 65, max: 120 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub flavor: Flavor,
    pub age_ranges: Vec<AgeRange>,
    pub findings: Vec<Finding>,
    pub diseases: Vec<DiseaseEntry>,
}

/// One broken invariant. `disease` / `finding` point at the offending entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub disease: Option<usize>,
    pub finding: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.disease, self.finding) {
            (Some(d), Some(x)) => write!(f, "disease {d}, finding {x}: {}", self.message),
            (Some(d), None) => write!(f, "disease {d}: {}", self.message),
            (None, Some(x)) => write!(f, "finding {x}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, disease: Option<usize>, finding: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            disease,
            finding,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "; {v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a knowledge base. Violations are
/// collected rather than raised, so an empty report means the base is valid.
pub fn validate(kb: &KnowledgeBase) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = kb.findings.len();

    if kb.diseases.is_empty() {
        report.push(None, None, "knowledge base has no diseases");
    }
    if kb.findings.is_empty() {
        report.push(None, None, "knowledge base has no findings");
    }

    for (pos, finding) in kb.findings.iter().enumerate() {
        if finding.id != pos {
            report.push(
                None,
                Some(finding.id),
                format!("finding ids must be dense: found id {} at position {pos}", finding.id),
            );
        }
        if finding.name.trim().is_empty() {
            report.push(None, Some(finding.id), "finding name is empty");
        }
    }

    for (i, a) in kb.age_ranges.iter().enumerate() {
        if a.min > a.max {
            report.push(None, None, format!("age range {i} has min {} > max {}", a.min, a.max));
        }
        for (j, b) in kb.age_ranges.iter().enumerate().skip(i + 1) {
            if a.min <= b.max && b.min <= a.max {
                report.push(None, None, format!("age ranges {i} and {j} overlap"));
            }
        }
    }

    let with_prior = kb
        .diseases
        .iter()
        .filter(|d| d.context_prior.is_some())
        .count();
    if with_prior != 0 && with_prior != kb.diseases.len() {
        report.push(
            None,
            None,
            format!(
                "context priors must be given for all diseases or none ({with_prior} of {})",
                kb.diseases.len()
            ),
        );
    }

    for (pos, disease) in kb.diseases.iter().enumerate() {
        let d = Some(disease.id);
        if disease.id != pos {
            report.push(
                d,
                None,
                format!("disease ids must be dense: found id {} at position {pos}", disease.id),
            );
        }
        if disease.name.trim().is_empty() {
            report.push(d, None, "disease name is empty");
        }
        if disease.findings.is_empty() {
            report.push(d, None, "disease has no linked findings");
        }
        let mut seen = BTreeSet::new();
        for link in &disease.findings {
            let f = Some(link.finding_id);
            if link.finding_id >= n {
                report.push(d, f, format!("dangling finding id (knowledge base has {n} findings)"));
            }
            if !seen.insert(link.finding_id) {
                report.push(d, f, "finding linked more than once");
            }
            match (kb.flavor, link.probability) {
                (Flavor::Probabilistic, None) => {
                    report.push(d, f, "probabilistic knowledge base link lacks a probability")
                }
                (Flavor::SetValued, Some(_)) => {
                    report.push(d, f, "set-valued knowledge base link carries a probability")
                }
                (_, Some(p)) if !(p > 0.0 && p <= 1.0) => {
                    report.push(d, f, format!("probability {p} outside (0, 1]"))
                }
                _ => {}
            }
        }
        if let Some(prior) = &disease.context_prior {
            let s = prior.sex_probability;
            if !(0.0..=1.0).contains(&s) {
                report.push(d, None, format!("sex probability {s} outside [0, 1]"));
            }
            if prior.age_range_probabilities.len() != kb.age_ranges.len() {
                report.push(
                    d,
                    None,
                    format!(
                        "{} age-range probabilities for {} age ranges",
                        prior.age_range_probabilities.len(),
                        kb.age_ranges.len()
                    ),
                );
            }
            if prior
                .age_range_probabilities
                .iter()
                .any(|p| !(0.0..=1.0).contains(p))
            {
                report.push(d, None, "age-range probability outside [0, 1]");
            }
            let sum: f64 = prior.age_range_probabilities.iter().sum();
            if !((sum - 1.0).abs() <= AGE_PROB_TOLERANCE) {
                report.push(d, None, format!("age-range probabilities sum to {sum}, not 1"));
            }
        }
    }
    report
}

impl KnowledgeBase {
    /// Number of findings (symptoms and examinations), `N`.
    pub fn n_findings(&self) -> usize {
        self.findings.len()
    }

    /// Number of diseases, `M`.
    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    /// Demographic context is only encoded for probabilistic bases whose
    /// diseases all carry priors.
    pub fn has_context(&self) -> bool {
        self.flavor == Flavor::Probabilistic
            && !self.diseases.is_empty()
            && self.diseases.iter().all(|d| d.context_prior.is_some())
    }

    /// Length of the context block appended to state vectors: one sex bit
    /// plus one bit per age range, or zero when context is disabled.
    pub fn context_dim(&self) -> usize {
        if self.has_context() {
            1 + self.age_ranges.len()
        } else {
            0
        }
    }

    /// Input width of both networks.
    pub fn state_dim(&self) -> usize {
        self.n_findings() + self.context_dim()
    }

    pub fn from_json_str(text: &str) -> Result<Self, KbError> {
        let kb: KnowledgeBase = serde_json::from_str(text)?;
        let report = validate(&kb);
        if report.is_empty() {
            Ok(kb)
        } else {
            Err(KbError::Invalid(report))
        }
    }

    pub fn to_json_string(&self) -> String {
        // Serializing plain data into a String cannot fail.
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let mut text = self.to_json_string();
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// SHA-256 over the canonical (compact) JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("knowledge base serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn finding_name(&self, id: usize) -> &str {
        self.findings.get(id).map(|f| f.name.as_str()).unwrap_or("?")
    }

    pub fn disease_name(&self, id: usize) -> &str {
        self.diseases.get(id).map(|d| d.name.as_str()).unwrap_or("?")
    }

    /// Looks a finding up by exact id string or case-insensitive name.
    pub fn find_finding(&self, key: &str) -> Option<usize> {
        let key = key.trim();
        if let Ok(id) = key.parse::<usize>() {
            return (id < self.n_findings()).then_some(id);
        }
        self.findings
            .iter()
            .find(|f| f.name.eq_ignore_ascii_case(key))
            .map(|f| f.id)
    }
}

/// Parameters of the synthetic fixture generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyKbSpec {
    pub n_diseases: usize,
    pub n_shared_findings: usize,
    pub signature_prob: f64,
    pub noise_prob: f64,
    pub flavor: Flavor,
}

impl ToyKbSpec {
    pub fn new(n_diseases: usize, n_shared_findings: usize, signature_prob: f64, noise_prob: f64) -> Self {
        Self {
            n_diseases,
            n_shared_findings,
            signature_prob,
            noise_prob,
            flavor: Flavor::Probabilistic,
        }
    }
}

/// Builds a fixture knowledge base.
///
/// Findings `0..n_diseases` are signatures: finding `d` belongs to disease
/// `d` only. The remaining `n_shared_findings` are shared; every disease is
/// linked to a seeded random half of them (rounded up). Signature links
/// carry `signature_prob` and shared links `noise_prob`; set-valued bases
/// drop the probabilities and mark shared findings as examinations.
pub fn gen_toy_kb(spec: &ToyKbSpec, seed: u64) -> Result<KnowledgeBase, KbError> {
    if spec.n_diseases == 0 {
        return Err(KbError::BadSpec("n_diseases must be at least 1".into()));
    }
    let prob_ok = |p: f64| p > 0.0 && p <= 1.0;
    if !prob_ok(spec.signature_prob) {
        return Err(KbError::BadSpec(format!(
            "signature_prob {} outside (0, 1]",
            spec.signature_prob
        )));
    }
    if spec.n_shared_findings > 0 && !prob_ok(spec.noise_prob) {
        return Err(KbError::BadSpec(format!(
            "noise_prob {} outside (0, 1]",
            spec.noise_prob
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.n_diseases;
    let s = spec.n_shared_findings;
    let shared_kind = match spec.flavor {
        Flavor::Probabilistic => FindingKind::Symptom,
        Flavor::SetValued => FindingKind::Examination,
    };
    let mut findings: Vec<Finding> = (0..m)
        .map(|d| Finding {
            id: d,
            name: format!("signature-{d:02}"),
            kind: FindingKind::Symptom,
        })
        .collect();
    findings.extend((0..s).map(|j| Finding {
        id: m + j,
        name: format!("shared-{j:02}"),
        kind: shared_kind,
    }));

    let prob = |p: f64| match spec.flavor {
        Flavor::Probabilistic => Some(p),
        Flavor::SetValued => None,
    };
    let per_disease = s.div_ceil(2);
    let diseases = (0..m)
        .map(|d| {
            let mut shared: Vec<usize> = index::sample(&mut rng, s, per_disease).into_vec();
            shared.sort_unstable();
            let mut links = vec![FindingLink {
                finding_id: d,
                probability: prob(spec.signature_prob),
            }];
            links.extend(shared.into_iter().map(|j| FindingLink {
                finding_id: m + j,
                probability: prob(spec.noise_prob),
            }));
            DiseaseEntry {
                id: d,
                name: format!("disease-{d:02}"),
                findings: links,
                context_prior: None,
            }
        })
        .collect();

    Ok(KnowledgeBase {
        flavor: spec.flavor,
        age_ranges: default_age_ranges(),
        findings,
        diseases,
    })
}
