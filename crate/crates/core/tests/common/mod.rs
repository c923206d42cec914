//! Reference implementations used by the integration and acceptance tests.
//! Nothing here calls into the engine's numerics; each oracle is written
//! from the textbook definitions so that it can disagree with the engine.

#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sympdx_core::kb::{DiseaseEntry, Finding, FindingKind, FindingLink, Flavor, KnowledgeBase};
use sympdx_core::nn::MlpModel;
use sympdx_core::patient_sim::{Patient, StateVector};
use sympdx_core::policy::TransitionSample;

// ---------------------------------------------------------------------------
// Networks

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Plain matrix-vector forward pass: `z_j = b_j + Σ_i x_i W_ij`, GELU on
/// every layer but the last.
pub fn forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.out_dim];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = layer.bias[j];
            for (i, ai) in a.iter().enumerate() {
                acc += ai * layer.weights[i * layer.out_dim + j];
            }
            *zj = if l == last { acc } else { gelu(acc) };
        }
        a = z;
    }
    a
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn mean_cross_entropy(model: &MlpModel, samples: &[(Vec<f64>, usize)]) -> f64 {
    samples
        .iter()
        .map(|(x, y)| -log_softmax(&forward(model, x))[*y])
        .sum::<f64>()
        / samples.len() as f64
}

/// `mean[(R − b) log π(a|s) + β H(π(·|s))]` with the softmax restricted to
/// unmasked findings.
pub fn policy_objective(model: &MlpModel, batch: &[TransitionSample], beta: f64, baseline: f64) -> f64 {
    batch
        .iter()
        .map(|t| {
            let z = forward(model, &t.state_before.to_input());
            let allowed: Vec<usize> = (0..z.len()).filter(|&i| t.mask_before[i]).collect();
            let sub: Vec<f64> = allowed.iter().map(|&i| z[i]).collect();
            let logp = log_softmax(&sub);
            let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            let k = allowed.iter().position(|&i| i == t.action).expect("action allowed");
            (t.return_ - baseline) * logp[k] + beta * entropy(&probs)
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Central difference of `f` with respect to parameter `index`.
pub fn central_difference(model: &MlpModel, index: usize, h: f64, f: impl Fn(&MlpModel) -> f64) -> f64 {
    let mut plus = model.clone();
    *plus.param_mut(index) += h;
    let mut minus = model.clone();
    *minus.param_mut(index) -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with a small floor so that vanishing gradients do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_state(rng: &mut ChaCha8Rng, n: usize) -> StateVector {
    StateVector {
        findings: (0..n).map(|_| rng.random_range(-1i8..=1)).collect(),
        context: Vec::new(),
    }
}

/// Random transitions on an `n`-finding state with at least one unmasked
/// action each.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<TransitionSample> {
    (0..len)
        .map(|_| {
            let state = random_state(rng, n);
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            let forced = rng.random_range(0..n);
            mask[forced] = true;
            let allowed: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let action = allowed[rng.random_range(0..allowed.len())];
            TransitionSample {
                state_before: state,
                action,
                reward: 0.0,
                return_: rng.random_range(-3.0..3.0),
                mask_before: mask,
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Knowledge bases

/// Set-valued base where every disease links `n_sym` of `pool_sym` symptoms
/// and `n_exam` of `pool_exam` examinations.
pub fn setvalued_kb(n_diseases: usize, pool_sym: usize, pool_exam: usize, n_sym: usize, n_exam: usize, seed: u64) -> KnowledgeBase {
    let mut r = rng(seed);
    let mut findings: Vec<Finding> = (0..pool_sym)
        .map(|i| Finding {
            id: i,
            name: format!("symptom-{i}"),
            kind: FindingKind::Symptom,
        })
        .collect();
    findings.extend((0..pool_exam).map(|i| Finding {
        id: pool_sym + i,
        name: format!("exam-{i}"),
        kind: FindingKind::Examination,
    }));
    let diseases = (0..n_diseases)
        .map(|d| {
            let mut ids: Vec<usize> = rand::seq::index::sample(&mut r, pool_sym, n_sym).into_vec();
            ids.extend(
                rand::seq::index::sample(&mut r, pool_exam, n_exam)
                    .into_iter()
                    .map(|i| pool_sym + i),
            );
            ids.sort_unstable();
            DiseaseEntry {
                id: d,
                name: format!("disease-{d}"),
                findings: ids
                    .into_iter()
                    .map(|finding_id| FindingLink {
                        finding_id,
                        probability: None,
                    })
                    .collect(),
                context_prior: None,
            }
        })
        .collect();
    KnowledgeBase {
        flavor: Flavor::SetValued,
        age_ranges: Vec::new(),
        findings,
        diseases,
    }
}

// ---------------------------------------------------------------------------
// Simulator statistics

/// Probability that finding `j` is positive in a probabilistic-flavor draw:
/// uniform over diseases, independent Bernoulli links, conditioned on at
/// least one positive symptom, computed by enumerating every outcome of
/// the disease's links.
pub fn probabilistic_marginals(kb: &KnowledgeBase) -> Vec<f64> {
    let n = kb.n_findings();
    let m = kb.n_diseases() as f64;
    let mut marg = vec![0.0; n];
    for d in &kb.diseases {
        let links: Vec<(usize, f64, bool)> = d
            .findings
            .iter()
            .map(|l| {
                (
                    l.finding_id,
                    l.probability.unwrap_or(1.0),
                    kb.findings[l.finding_id].kind == FindingKind::Symptom,
                )
            })
            .collect();
        assert!(links.len() <= 20, "enumeration oracle limited to 20 links");
        let mut accepted = 0.0;
        let mut joint = vec![0.0; n];
        for bits in 0u32..(1 << links.len()) {
            let mut p = 1.0;
            let mut any_symptom = false;
            for (k, &(_, q, sym)) in links.iter().enumerate() {
                if bits >> k & 1 == 1 {
                    p *= q;
                    any_symptom |= sym;
                } else {
                    p *= 1.0 - q;
                }
            }
            if !any_symptom {
                continue;
            }
            accepted += p;
            for (k, &(f, _, _)) in links.iter().enumerate() {
                if bits >> k & 1 == 1 {
                    joint[f] += p;
                }
            }
        }
        for f in 0..n {
            marg[f] += joint[f] / accepted / m;
        }
    }
    marg
}

pub fn poisson_pmf(lambda: f64, k: usize) -> f64 {
    let mut log_fact = 0.0;
    for i in 2..=k {
        log_fact += (i as f64).ln();
    }
    (k as f64 * lambda.ln() - lambda - log_fact).exp()
}

/// `P(clamp(X, lo, hi) = k)` for `X ~ Poisson(lambda)`.
pub fn clamped_pmf(lambda: f64, lo: usize, hi: usize) -> Vec<f64> {
    let mut pmf = vec![0.0; hi + 1];
    let mut below = 0.0;
    for k in 0..lo {
        below += poisson_pmf(lambda, k);
    }
    let mut inner = 0.0;
    for (k, slot) in pmf.iter_mut().enumerate().take(hi + 1).skip(lo) {
        *slot = poisson_pmf(lambda, k);
        inner += *slot;
    }
    pmf[lo] += below;
    pmf[hi] += 1.0 - below - inner;
    pmf
}

pub fn clamped_mean(lambda: f64, lo: usize, hi: usize) -> f64 {
    clamped_pmf(lambda, lo, hi)
        .iter()
        .enumerate()
        .map(|(k, p)| k as f64 * p)
        .sum()
}

/// Expected (symptom, exam, self-report) counts of the set-valued
/// procedure on `kb`.
pub fn setvalued_expected_counts(kb: &KnowledgeBase, sym_mean: f64, exam_mean: f64, report_mean: f64) -> (f64, f64, f64) {
    let m = kb.n_diseases() as f64;
    let (mut s, mut e, mut r) = (0.0, 0.0, 0.0);
    for d in &kb.diseases {
        let n_sym = d
            .findings
            .iter()
            .filter(|l| kb.findings[l.finding_id].kind == FindingKind::Symptom)
            .count();
        let n_exam = d.findings.len() - n_sym;
        s += clamped_mean(sym_mean, 1, n_sym) / m;
        e += clamped_mean(exam_mean, 0, n_exam) / m;
        let sym_pmf = clamped_pmf(sym_mean, 1, n_sym);
        for (k, p) in sym_pmf.iter().enumerate().skip(1) {
            r += p * clamped_mean(report_mean, 1, k) / m;
        }
    }
    (s, e, r)
}

// ---------------------------------------------------------------------------
// Bayes-optimal greedy inquiry

/// Posterior over diseases from observed findings under independent link
/// likelihoods (unlinked findings are never positive).
pub fn posterior(kb: &KnowledgeBase, observed: &[(usize, bool)]) -> Vec<f64> {
    let mut post: Vec<f64> = kb
        .diseases
        .iter()
        .map(|d| {
            observed
                .iter()
                .map(|&(f, positive)| {
                    let p = d
                        .findings
                        .iter()
                        .find(|l| l.finding_id == f)
                        .map(|l| l.probability.unwrap_or(1.0))
                        .unwrap_or(0.0);
                    if positive {
                        p
                    } else {
                        1.0 - p
                    }
                })
                .product::<f64>()
        })
        .collect();
    let z: f64 = post.iter().sum();
    if z > 0.0 {
        post.iter_mut().for_each(|p| *p /= z);
    }
    post
}

fn link_prob(kb: &KnowledgeBase, d: usize, f: usize) -> f64 {
    kb.diseases[d]
        .findings
        .iter()
        .find(|l| l.finding_id == f)
        .map(|l| l.probability.unwrap_or(1.0))
        .unwrap_or(0.0)
}

/// Result of the greedy information-gain reference on one patient.
pub struct OracleEpisode {
    pub diagnosis: usize,
    pub turns: usize,
}

/// Asks, at each turn, the unasked finding with the largest expected
/// reduction in posterior entropy; stops when the MAP posterior reaches
/// `confidence`, when nothing informative remains, or after `max_steps`.
pub fn greedy_information_gain(kb: &KnowledgeBase, patient: &Patient, max_steps: usize, confidence: f64) -> OracleEpisode {
    let n = kb.n_findings();
    let mut observed: Vec<(usize, bool)> = patient.self_reports.iter().map(|&f| (f, true)).collect();
    let mut known: BTreeSet<usize> = patient.self_reports.clone();
    let mut turns = 0;
    let mut post = posterior(kb, &observed);
    while turns < max_steps {
        if post.iter().copied().fold(0.0, f64::max) >= confidence {
            break;
        }
        let h = entropy(&post);
        let mut best: Option<(usize, f64)> = None;
        for f in (0..n).filter(|f| !known.contains(f)) {
            let p_pos: f64 = post.iter().enumerate().map(|(d, &w)| w * link_prob(kb, d, f)).sum();
            let mut expected = 0.0;
            for (positive, p) in [(true, p_pos), (false, 1.0 - p_pos)] {
                if p <= 1e-15 {
                    continue;
                }
                let mut next = observed.clone();
                next.push((f, positive));
                expected += p * entropy(&posterior(kb, &next));
            }
            let gain = h - expected;
            if best.is_none_or(|(_, g)| gain > g + 1e-12) {
                best = Some((f, gain));
            }
        }
        let Some((f, gain)) = best else { break };
        if gain <= 1e-12 {
            break;
        }
        let positive = patient.positives.contains(&f);
        observed.push((f, positive));
        known.insert(f);
        turns += 1;
        post = posterior(kb, &observed);
    }
    let diagnosis = post
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    OracleEpisode { diagnosis, turns }
}

// ---------------------------------------------------------------------------
// Trained fixtures

pub fn toy_kb() -> KnowledgeBase {
    sympdx_core::kb::gen_toy_kb(&sympdx_core::kb::ToyKbSpec::new(20, 10, 1.0, 0.3), 0).expect("toy kb")
}

/// Short default-config training run on the toy base.
pub fn quick_checkpoint(kb: &KnowledgeBase, episodes: usize, seed: u64) -> sympdx_core::Checkpoint {
    let cfg = sympdx_core::TrainConfig {
        total_episodes: episodes,
        master_seed: seed,
        ..sympdx_core::TrainConfig::default()
    };
    sympdx_core::train(kb, &cfg).expect("training").checkpoint
}
