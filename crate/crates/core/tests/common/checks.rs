//! Fast acceptance checks shared by the acceptance target and the ordinary
//! integration tests. Each returns a one-line summary or a failure reason.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use sympdx_core::classifier::{loss_and_gradient, ClassifierSample, Classifier};
use sympdx_core::kb::{gen_toy_kb, FindingKind, KnowledgeBase, ToyKbSpec};
use sympdx_core::nn::{Dense, MlpModel};
use sympdx_core::patient_sim::{simulate, simulate_setvalued, Patient, SimConfig, StateVector};
use sympdx_core::policy::{objective_gradient, Policy};
use sympdx_core::rewards::{combine, entropy_reward, step_reward_rp, terminal_reward_rp, Outcome, RewardConfig};
use sympdx_core::thresholds::{ThresholdInit, ThresholdMode, ThresholdTable};
use sympdx_core::trainer::{run_episode, run_episode_from, ActionSelection, EpisodeRecord, Termination, TrainConfig};
use sympdx_core::Feedback;

use super::*;

pub type CheckResult = Result<String, String>;

fn randomize(model: &mut MlpModel, r: &mut ChaCha8Rng) {
    for i in 0..model.param_count() {
        *model.param_mut(i) = r.random_range(-1.0..1.0);
    }
}

/// Analytic vs central-difference gradients of both objectives.
pub fn gradients() -> CheckResult {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut r = rng(101);
    let mut probes = 0;
    let mut worst: f64 = 0.0;

    let policy_shapes: [&[usize]; 3] = [&[6, 12, 10, 6], &[9, 16, 9], &[5, 8, 8, 8, 5]];
    for dims in policy_shapes {
        let mut model = MlpModel::glorot(dims, &mut r).map_err(|e| e.to_string())?;
        randomize(&mut model, &mut r);
        if model.param_count() > 1000 {
            return Err(format!("model {dims:?} exceeds 1k parameters"));
        }
        let n = dims[0];
        let batch = random_batch(&mut r, n, 8);
        let (beta, baseline) = (0.05, 0.3);
        let analytic = objective_gradient(&model, &batch, beta, baseline)
            .map_err(|e| e.to_string())?
            .gradient
            .flatten();
        for _ in 0..40 {
            let i = r.random_range(0..model.param_count());
            let numeric = central_difference(&model, i, H, |m| policy_objective(m, &batch, beta, baseline));
            let err = relative_error(analytic[i], numeric);
            worst = worst.max(err);
            probes += 1;
            if err >= TOL {
                return Err(format!(
                    "policy {dims:?} param {i}: analytic {} numeric {numeric} rel {err:.2e}",
                    analytic[i]
                ));
            }
        }
    }

    let classifier_shapes: [(&[usize], usize); 3] = [(&[6, 16, 16, 5], 5), (&[10, 20, 4], 4), (&[8, 12, 10, 10, 3], 3)];
    for (dims, m) in classifier_shapes {
        let mut model = MlpModel::glorot(dims, &mut r).map_err(|e| e.to_string())?;
        randomize(&mut model, &mut r);
        if model.param_count() > 1000 {
            return Err(format!("model {dims:?} exceeds 1k parameters"));
        }
        let samples: Vec<ClassifierSample> = (0..8)
            .map(|_| ClassifierSample {
                state: random_state(&mut r, dims[0]),
                label: r.random_range(0..m),
            })
            .collect();
        let plain: Vec<(Vec<f64>, usize)> = samples.iter().map(|s| (s.state.to_input(), s.label)).collect();
        let (_, grads) = loss_and_gradient(&model, &samples).map_err(|e| e.to_string())?;
        let analytic = grads.flatten();
        for _ in 0..40 {
            let i = r.random_range(0..model.param_count());
            let numeric = central_difference(&model, i, H, |mm| mean_cross_entropy(mm, &plain));
            let err = relative_error(analytic[i], numeric);
            worst = worst.max(err);
            probes += 1;
            if err >= TOL {
                return Err(format!(
                    "classifier {dims:?} param {i}: analytic {} numeric {numeric} rel {err:.2e}",
                    analytic[i]
                ));
            }
        }
    }
    Ok(format!("{probes} probes, worst relative error {worst:.2e}"))
}

fn close(name: &str, got: f64, want: f64, tol: f64, failures: &mut Vec<String>) {
    if (got - want).abs() > tol || got.is_nan() {
        failures.push(format!("{name}: got {got}, want {want}"));
    }
}

/// Reward and threshold formulas at hand-computed points.
pub fn formulas() -> CheckResult {
    const TOL: f64 = 1e-12;
    let mut f = Vec::new();
    let cfg = RewardConfig::default();
    close("rp positive", step_reward_rp(Feedback::Positive, &cfg), 0.7, TOL, &mut f);
    close("rp negative", step_reward_rp(Feedback::Negative, &cfg), -0.3, TOL, &mut f);
    let zeroed = RewardConfig {
        negative_discovery_bonus: 0.0,
        positive_discovery_bonus: 0.0,
        ..RewardConfig::default()
    };
    close("rp zeroed", step_reward_rp(Feedback::Positive, &zeroed), -1.0, TOL, &mut f);
    close("terminal correct", terminal_reward_rp(Outcome::Correct, &cfg), 1.0, TOL, &mut f);
    close("terminal incorrect", terminal_reward_rp(Outcome::Incorrect, &cfg), -1.0, TOL, &mut f);
    close("terminal timeout", terminal_reward_rp(Outcome::Timeout, &cfg), -1.0, TOL, &mut f);
    close("rH substitution", entropy_reward(1.5, 0.5, 2.0), 0.5, TOL, &mut f);
    close("rH rising entropy", entropy_reward(0.5, 1.5, 2.0), 0.0, TOL, &mut f);
    close("rH flat", entropy_reward(1.0, 1.0, 2.0), 0.0, TOL, &mut f);
    close("rH zero h0", entropy_reward(0.3, 0.1, 0.0), 0.0, TOL, &mut f);
    close("combine", combine(0.7, 0.2, &cfg), 1.2, TOL, &mut f);
    let no_nu = RewardConfig { nu: 0.0, ..cfg.clone() };
    close("combine nu=0", combine(0.7, 0.2, &no_nu), 0.7, TOL, &mut f);
    close("combine zeros", combine(0.0, 0.0, &cfg), 0.0, TOL, &mut f);

    let table = |k: f64, lambda: f64| {
        ThresholdTable::new(2, ThresholdInit::Uniform(k), lambda, 0.01, ThresholdMode::Adaptive).expect("valid table")
    };
    let mut t = table(1.0, 0.99);
    let applied = t.update_threshold(0, 0.5);
    close("update K=1 H=0.5", t.values[0], 0.995, TOL, &mut f);
    if !applied {
        f.push("update K=1 H=0.5 not applied".into());
    }
    let mut t = table(0.505, 0.99);
    if t.update_threshold(0, 0.5) || t.values[0] != 0.505 {
        f.push("epsilon gate did not hold K=0.505".into());
    }
    let mut t = table(0.7, 1.0);
    t.update_threshold(1, 0.1);
    close("lambda=1", t.values[1], 0.7, TOL, &mut f);
    let mut t = table(1.0, 0.99);
    t.batch_update(&[]);
    if t.values != vec![1.0, 1.0] {
        f.push("empty batch changed the table".into());
    }
    let mut t = table(1.0, 0.99);
    t.batch_update(&[(0, 0.4), (0, 0.6)]);
    close("batch mean", t.values[0], 0.995, TOL, &mut f);
    close("batch other disease", t.values[1], 1.0, TOL, &mut f);
    let mut t = table(1.0, 0.99);
    t.batch_update(&[(0, 0.4), (1, 0.2)]);
    close("independent 0", t.values[0], 0.99 + 0.01 * 0.4, TOL, &mut f);
    close("independent 1", t.values[1], 0.99 + 0.01 * 0.2, TOL, &mut f);

    let stop = ThresholdTable::new(1, ThresholdInit::Uniform(0.05), 0.99, 0.01, ThresholdMode::Adaptive).expect("table");
    if !stop.should_stop(0.04, 0) {
        f.push("0.04 < 0.05 did not stop".into());
    }
    if stop.should_stop(0.05, 0) {
        f.push("equality stopped".into());
    }
    let fixed = ThresholdTable::new(1, ThresholdInit::Uniform(5.0), 0.99, 0.01, ThresholdMode::Fixed(0.1)).expect("table");
    if fixed.should_stop(0.2, 0) || !fixed.should_stop(0.09, 0) {
        f.push("fixed 0.1 did not override the table".into());
    }

    if f.is_empty() {
        Ok("all formula examples exact to 1e-12".into())
    } else {
        Err(f.join("; "))
    }
}

// ---------------------------------------------------------------------------
// Hand-executed trace

pub fn trace_kb() -> KnowledgeBase {
    KnowledgeBase::from_json_str(
        r#"{"flavor":"probabilistic","age_ranges":[],
            "findings":[{"id":0,"name":"f0","kind":"symptom"},{"id":1,"name":"f1","kind":"symptom"}],
            "diseases":[
              {"id":0,"name":"d0","findings":[{"finding_id":0,"probability":1.0},{"finding_id":1,"probability":0.5}]},
              {"id":1,"name":"d1","findings":[{"finding_id":0,"probability":0.5},{"finding_id":1,"probability":1.0}]}]}"#,
    )
    .expect("trace kb")
}

/// Policy: linear, zero weights, bias favouring f0. Classifier: one GELU
/// layer doubling each input, then `z0 = h0 − h1`, `z1 = h1 − h0`.
pub fn trace_models() -> (Policy, Classifier) {
    let policy = MlpModel {
        layer_dims: vec![2, 2],
        layers: vec![Dense {
            in_dim: 2,
            out_dim: 2,
            weights: vec![0.0; 4],
            bias: vec![0.2, 0.0],
        }],
    };
    let classifier = MlpModel {
        layer_dims: vec![2, 2, 2],
        layers: vec![
            Dense {
                in_dim: 2,
                out_dim: 2,
                weights: vec![2.0, 0.0, 0.0, 2.0],
                bias: vec![0.0, 0.0],
            },
            Dense {
                in_dim: 2,
                out_dim: 2,
                weights: vec![1.0, -1.0, -1.0, 1.0],
                bias: vec![0.0, 0.0],
            },
        ],
    };
    (Policy::new(policy), Classifier::new(classifier))
}

/// Entropy of the hand-set classifier at state `(x0, x1)`.
fn hand_entropy(x0: f64, x1: f64) -> f64 {
    let d = gelu(2.0 * x0) - gelu(2.0 * x1);
    let p0 = 1.0 / (1.0 + (-2.0 * d).exp());
    let p1 = 1.0 - p0;
    -(p0 * p0.ln() + p1 * p1.ln())
}

struct ExpectedStep {
    state_before: [i8; 2],
    action: usize,
    reward: f64,
    return_: f64,
    entropy_after: f64,
}

fn compare_trace(
    name: &str,
    ep: &EpisodeRecord,
    steps: &[ExpectedStep],
    h0: f64,
    termination: Termination,
    outcome: Outcome,
    diagnosis: usize,
    f: &mut Vec<String>,
) {
    const TOL: f64 = 1e-9;
    close(&format!("{name} H0"), ep.initial_entropy, h0, TOL, f);
    if ep.transitions.len() != steps.len() {
        f.push(format!("{name}: {} transitions, want {}", ep.transitions.len(), steps.len()));
        return;
    }
    for (i, (t, want)) in ep.transitions.iter().zip(steps).enumerate() {
        if t.state_before.findings != want.state_before {
            f.push(format!("{name} step {i}: state {:?}", t.state_before.findings));
        }
        if t.action != want.action {
            f.push(format!("{name} step {i}: action {}", t.action));
        }
        close(&format!("{name} step {i} reward"), t.reward, want.reward, TOL, f);
        close(&format!("{name} step {i} return"), t.return_, want.return_, TOL, f);
        close(&format!("{name} step {i} entropy"), ep.entropies[i], want.entropy_after, TOL, f);
    }
    if ep.termination != termination || ep.outcome != outcome || ep.diagnosis != diagnosis {
        f.push(format!(
            "{name}: ended {:?}/{:?}/{} want {termination:?}/{outcome:?}/{diagnosis}",
            ep.termination, ep.outcome, ep.diagnosis
        ));
    }
}

fn patient(disease: usize, positives: &[usize], reports: &[usize]) -> Patient {
    Patient {
        true_disease: disease,
        positives: positives.iter().copied().collect(),
        self_reports: reports.iter().copied().collect::<BTreeSet<_>>(),
        context: None,
    }
}

/// Three episodes on the 2×2 base: an entropy stop, a timeout with a tie,
/// and a two-step timeout that exercises discounting.
pub fn trace_oracle() -> CheckResult {
    let kb = trace_kb();
    let (policy, classifier) = trace_models();
    let mut f = Vec::new();
    let mut r = rng(0);
    let ln2 = std::f64::consts::LN_2;
    let (mu, nu, gamma) = (1.0, 2.5, 0.99);

    let h_a = hand_entropy(1.0, 0.0);
    let h_b = hand_entropy(1.0, -1.0);
    let k_mid = 0.5 * (h_a + h_b);

    // Self-report f0, f1 negative: entropy drops below K and d0 is right.
    let cfg1 = TrainConfig {
        max_steps: 1,
        ..TrainConfig::default()
    };
    let table = ThresholdTable::new(2, ThresholdInit::Uniform(k_mid), 0.99, 0.01, ThresholdMode::Adaptive).expect("table");
    let ep = run_episode(&patient(0, &[0], &[0]), &kb, &policy, &classifier, &table, &cfg1, ActionSelection::Sample, &mut r)
        .map_err(|e| e.to_string())?;
    let reward = mu * (-1.0 + 0.7) + nu * ((h_a - h_b) / h_a) + mu * 1.0;
    compare_trace(
        "stop",
        &ep,
        &[ExpectedStep {
            state_before: [1, 0],
            action: 1,
            reward,
            return_: reward,
            entropy_after: h_b,
        }],
        h_a,
        Termination::EntropyStop,
        Outcome::Correct,
        0,
        &mut f,
    );

    // Self-report f0, f1 positive: the classifier is torn, argmax picks d0.
    let ep = run_episode(&patient(1, &[0, 1], &[0]), &kb, &policy, &classifier, &table, &cfg1, ActionSelection::Greedy, &mut r)
        .map_err(|e| e.to_string())?;
    let reward = mu * (-1.0 + 1.7) + nu * 0.0 + mu * -1.0;
    compare_trace(
        "tie",
        &ep,
        &[ExpectedStep {
            state_before: [1, 0],
            action: 1,
            reward,
            return_: reward,
            entropy_after: ln2,
        }],
        h_a,
        Termination::Timeout,
        Outcome::Timeout,
        0,
        &mut f,
    );

    // Empty start, two inquiries, timeout even though d0 is correct.
    let cfg2 = TrainConfig {
        max_steps: 2,
        gamma,
        ..TrainConfig::default()
    };
    let low = ThresholdTable::new(2, ThresholdInit::Uniform(0.05), 0.99, 0.01, ThresholdMode::Adaptive).expect("table");
    let p = patient(0, &[0], &[0]);
    let ep = run_episode_from(
        StateVector::empty(2, Vec::new()),
        0,
        &p,
        &kb,
        &policy,
        &classifier,
        &low,
        &cfg2,
        ActionSelection::Greedy,
        &mut r,
    )
    .map_err(|e| e.to_string())?;
    let r1 = mu * 0.7 + nu * ((ln2 - h_a) / ln2);
    let r2 = mu * -0.3 + nu * ((h_a - h_b) / ln2) + mu * -1.0;
    compare_trace(
        "two-step",
        &ep,
        &[
            ExpectedStep {
                state_before: [0, 0],
                action: 0,
                reward: r1,
                return_: r1 + gamma * r2,
                entropy_after: h_a,
            },
            ExpectedStep {
                state_before: [1, 0],
                action: 1,
                reward: r2,
                return_: r2,
                entropy_after: h_b,
            },
        ],
        ln2,
        Termination::Timeout,
        Outcome::Timeout,
        0,
        &mut f,
    );

    if f.is_empty() {
        Ok("3 hand-executed episodes match to 1e-9".into())
    } else {
        Err(f.join("; "))
    }
}

// ---------------------------------------------------------------------------
// Simulators

pub fn simulator_statistics() -> CheckResult {
    const DRAWS: usize = 100_000;
    let mut detail = Vec::new();
    let sim = SimConfig::default();

    for (label, spec, seed) in [
        ("toy", ToyKbSpec::new(20, 10, 1.0, 0.3), 0u64),
        ("noisy", ToyKbSpec::new(6, 6, 0.6, 0.3), 3),
    ] {
        let kb = gen_toy_kb(&spec, seed).map_err(|e| e.to_string())?;
        let want = probabilistic_marginals(&kb);
        let mut counts = vec![0usize; kb.n_findings()];
        let mut r = rng(seed + 17);
        for _ in 0..DRAWS {
            let p = simulate(&kb, &mut r, &sim).map_err(|e| e.to_string())?;
            for &j in &p.positives {
                counts[j] += 1;
            }
        }
        let worst = counts
            .iter()
            .zip(&want)
            .map(|(&c, &w)| (c as f64 / DRAWS as f64 - w).abs())
            .fold(0.0, f64::max);
        if worst >= 0.01 {
            return Err(format!("{label}: finding frequency off by {worst:.4}"));
        }
        detail.push(format!("{label} max |freq−p| {worst:.4}"));
    }

    for (label, kb) in [
        ("roomy", setvalued_kb(10, 20, 12, 10, 8, 5)),
        ("tight", setvalued_kb(10, 12, 6, 4, 3, 6)),
    ] {
        let (ws, we, wr) = setvalued_expected_counts(&kb, sim.symptom_poisson_mean, sim.exam_poisson_mean, sim.self_report_poisson_mean);
        let (mut s, mut e, mut rep) = (0usize, 0usize, 0usize);
        let mut r = rng(99);
        for _ in 0..DRAWS {
            let p = simulate_setvalued(&kb, &mut r, &sim).map_err(|e| e.to_string())?;
            let n_sym = p
                .positives
                .iter()
                .filter(|&&j| kb.findings[j].kind == FindingKind::Symptom)
                .count();
            s += n_sym;
            e += p.positives.len() - n_sym;
            rep += p.self_reports.len();
        }
        let n = DRAWS as f64;
        for (what, got, want) in [("symptoms", s as f64 / n, ws), ("exams", e as f64 / n, we), ("self-reports", rep as f64 / n, wr)] {
            let rel = (got - want).abs() / want;
            if rel >= 0.03 {
                return Err(format!("{label} {what}: mean {got:.4} vs {want:.4}"));
            }
        }
        detail.push(format!("{label} means within 3%"));
    }
    Ok(detail.join(", "))
}
