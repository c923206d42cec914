//! Joint training of the inquiry policy, the classifier and the thresholds.
//!
//! Episodes are collected in windows of `update_interval_episodes`. Every
//! episode in a window runs against the parameter snapshot that opened the
//! window; at the window boundary the policy, the classifier and the
//! thresholds are updated from the collected samples, in that order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::classifier::{Classifier, ClassifierSample};
use crate::kb::KnowledgeBase;
use crate::nn::NnError;
use crate::patient_sim::{initial_state, simulate, Feedback, Patient, SimConfig, SimError, StateVector};
use crate::policy::{discounted_returns, greedy_action, inquiry_mask, sample_action, Policy, PolicyError, TransitionSample};
use crate::rewards::{combine, entropy_reward, step_reward_rp, terminal_reward_rp, Outcome, RewardConfig};
use crate::rng::{stream_rng, Rng, Stream};
use crate::thresholds::{ThresholdError, ThresholdInit, ThresholdMode, ThresholdTable, ThresholdUpdate};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model does not fit the knowledge base: {0}")]
    Dimension(String),
    #[error("no inquirable finding left at turn {turn} (T = {max_steps})")]
    Exhausted { turn: usize, max_steps: usize },
    #[error("training aborted in window {window}: {source}")]
    Window {
        window: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Hidden-layer widths of both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub policy_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![64, 64, 64],
            classifier_hidden: vec![64, 64],
        }
    }
}

impl NetworkConfig {
    /// Full-size layouts for the large set-valued knowledge bases.
    pub fn large_set_valued() -> Self {
        Self {
            policy_hidden: vec![5120, 10240, 5120],
            classifier_hidden: vec![5120, 5120],
        }
    }

    /// Full-size layouts for probabilistic knowledge bases.
    pub fn large_probabilistic() -> Self {
        Self {
            policy_hidden: vec![2048, 2048, 2048],
            classifier_hidden: vec![2048, 2048],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::default()),
            "large_probabilistic" => Some(Self::large_probabilistic()),
            "large_set_valued" => Some(Self::large_set_valued()),
            _ => None,
        }
    }

    pub fn policy_dims(&self, kb: &KnowledgeBase) -> Vec<usize> {
        let mut dims = vec![kb.state_dim()];
        dims.extend(&self.policy_hidden);
        dims.push(kb.n_findings());
        dims
    }

    pub fn classifier_dims(&self, kb: &KnowledgeBase) -> Vec<usize> {
        let mut dims = vec![kb.state_dim()];
        dims.extend(&self.classifier_hidden);
        dims.push(kb.n_diseases());
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub init: ThresholdInit,
    pub lambda: f64,
    pub epsilon: f64,
    pub mode: ThresholdMode,
    /// Update after every correct episode instead of once per window.
    pub per_episode: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            init: ThresholdInit::Uniform(1.0),
            lambda: 0.99,
            epsilon: 0.01,
            mode: ThresholdMode::Adaptive,
            per_episode: false,
        }
    }
}

impl ThresholdConfig {
    pub fn build(&self, n_diseases: usize) -> Result<ThresholdTable, ThresholdError> {
        ThresholdTable::new(n_diseases, self.init.clone(), self.lambda, self.epsilon, self.mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub gamma: f64,
    pub beta_init: f64,
    pub beta_final: f64,
    /// Windows over which β decays linearly; defaults to the run length.
    pub beta_decay_windows: Option<usize>,
    pub update_interval_episodes: usize,
    pub total_episodes: usize,
    pub policy_lr: f64,
    pub classifier_lr: f64,
    /// Split each window's transitions into Adam steps of this many samples.
    pub policy_minibatch: Option<usize>,
    pub classifier_minibatch: Option<usize>,
    /// Subtract a moving average of returns from `R`.
    pub use_baseline: bool,
    pub baseline_momentum: f64,
    /// Allow stopping on `s_0` before any inquiry.
    pub stop_check_at_start: bool,
    pub master_seed: u64,
    pub reward: RewardConfig,
    pub thresholds: ThresholdConfig,
    pub network: NetworkConfig,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 15,
            gamma: 0.99,
            beta_init: 0.01,
            beta_final: 0.0,
            beta_decay_windows: None,
            update_interval_episodes: 200,
            total_episodes: 200_000,
            policy_lr: 2e-5,
            classifier_lr: 1e-4,
            policy_minibatch: Some(64),
            classifier_minibatch: Some(64),
            use_baseline: false,
            baseline_momentum: 0.9,
            stop_check_at_start: false,
            master_seed: 0,
            reward: RewardConfig::default(),
            thresholds: ThresholdConfig::default(),
            network: NetworkConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.update_interval_episodes == 0 {
            return bad("update_interval_episodes must be at least 1".into());
        }
        if !(self.policy_lr > 0.0 && self.classifier_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.beta_init >= 0.0 && self.beta_final >= 0.0) {
            return bad("entropy weights must be non-negative".into());
        }
        if self.policy_minibatch == Some(0) || self.classifier_minibatch == Some(0) {
            return bad("minibatch sizes must be positive".into());
        }
        if !self.reward.is_finite() {
            return bad("reward constants must be finite".into());
        }
        Ok(())
    }

    pub fn n_windows(&self) -> usize {
        self.total_episodes.div_ceil(self.update_interval_episodes)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml_str(&text)
        }
    }
}

/// Linear decay from `beta_init` to `beta_final`, clamped afterwards.
pub fn beta_schedule(window_index: usize, cfg: &TrainConfig) -> f64 {
    let steps = cfg.beta_decay_windows.unwrap_or_else(|| cfg.n_windows());
    if steps == 0 || window_index >= steps {
        return cfg.beta_final;
    }
    let frac = window_index as f64 / steps as f64;
    cfg.beta_init + (cfg.beta_final - cfg.beta_init) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EntropyStop,
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSelection {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub true_disease: usize,
    pub transitions: Vec<TransitionSample>,
    pub final_state: StateVector,
    pub initial_entropy: f64,
    /// `H(s_t)` after every inquiry.
    pub entropies: Vec<f64>,
    pub final_entropy: f64,
    pub diagnosis: usize,
    pub termination: Termination,
    pub outcome: Outcome,
    pub turns: usize,
    pub positives_found: usize,
}

impl EpisodeRecord {
    pub fn is_correct(&self) -> bool {
        self.diagnosis == self.true_disease
    }

    /// `s_0` through `s_fin`.
    pub fn visited_states(&self) -> impl Iterator<Item = &StateVector> {
        self.transitions
            .iter()
            .map(|t| &t.state_before)
            .chain(std::iter::once(&self.final_state))
    }

    /// Discounted return from the first transition.
    pub fn episode_return(&self) -> f64 {
        self.transitions.first().map(|t| t.return_).unwrap_or(0.0)
    }
}

fn check_dims(kb: &KnowledgeBase, policy: &Policy, classifier: &Classifier, table: &ThresholdTable) -> Result<(), TrainError> {
    let (s, n, m) = (kb.state_dim(), kb.n_findings(), kb.n_diseases());
    let p = &policy.model;
    let c = &classifier.model;
    if p.input_dim() != s || p.output_dim() != n {
        return Err(TrainError::Dimension(format!(
            "policy is {}->{}, knowledge base needs {s}->{n}",
            p.input_dim(),
            p.output_dim()
        )));
    }
    if c.input_dim() != s || c.output_dim() != m {
        return Err(TrainError::Dimension(format!(
            "classifier is {}->{}, knowledge base needs {s}->{m}",
            c.input_dim(),
            c.output_dim()
        )));
    }
    if table.values.len() != m {
        return Err(TrainError::Dimension(format!(
            "threshold table has {} entries for {m} diseases",
            table.values.len()
        )));
    }
    Ok(())
}

/// The answering side of an episode: a simulated patient, or anything else
/// that can report on a finding.
pub trait Respondent {
    fn answer(&mut self, finding: usize) -> Feedback;
}

impl Respondent for &Patient {
    fn answer(&mut self, finding: usize) -> Feedback {
        self.respond(finding)
    }
}

/// Runs one diagnostic episode against a simulated patient.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    patient: &Patient,
    kb: &KnowledgeBase,
    policy: &Policy,
    classifier: &Classifier,
    table: &ThresholdTable,
    cfg: &TrainConfig,
    selection: ActionSelection,
    rng: &mut Rng,
) -> Result<EpisodeRecord, TrainError> {
    let s0 = initial_state(patient, kb);
    run_episode_from(s0, patient.true_disease, patient, kb, policy, classifier, table, cfg, selection, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn run_episode_from(
    s0: StateVector,
    true_disease: usize,
    mut respondent: impl Respondent,
    kb: &KnowledgeBase,
    policy: &Policy,
    classifier: &Classifier,
    table: &ThresholdTable,
    cfg: &TrainConfig,
    selection: ActionSelection,
    rng: &mut Rng,
) -> Result<EpisodeRecord, TrainError> {
    check_dims(kb, policy, classifier, table)?;
    let n = kb.n_findings();
    let first = classifier.predict(&s0)?;
    let h0 = first.entropy;
    let mut state = s0;
    let mut asked = vec![false; n];
    let mut transitions: Vec<TransitionSample> = Vec::new();
    let mut entropies = Vec::new();
    let mut h_prev = h0;
    let mut diagnosis = first.top_disease;
    let mut termination = Termination::Timeout;
    let mut positives_found = 0;

    if cfg.stop_check_at_start && table.should_stop(h0, diagnosis) {
        termination = Termination::EntropyStop;
    } else {
        for turn in 1..=cfg.max_steps {
            let mask = inquiry_mask(&state, &asked);
            let dist = match policy.distribution(&state, &mask) {
                Ok(d) => d,
                Err(PolicyError::Exhausted) => {
                    return Err(TrainError::Exhausted {
                        turn,
                        max_steps: cfg.max_steps,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let action = match selection {
                ActionSelection::Sample => sample_action(&dist, rng),
                ActionSelection::Greedy => greedy_action(&dist),
            };
            let feedback = respondent.answer(action);
            if feedback == Feedback::Positive {
                positives_found += 1;
            }
            let state_before = state.clone();
            state.set(action, feedback);
            asked[action] = true;

            let pred = classifier.predict(&state)?;
            let reward = combine(
                step_reward_rp(feedback, &cfg.reward),
                entropy_reward(h_prev, pred.entropy, h0),
                &cfg.reward,
            );
            transitions.push(TransitionSample {
                state_before,
                action,
                reward,
                return_: 0.0,
                mask_before: mask,
            });
            entropies.push(pred.entropy);
            h_prev = pred.entropy;
            diagnosis = pred.top_disease;
            if table.should_stop(pred.entropy, pred.top_disease) {
                termination = Termination::EntropyStop;
                break;
            }
        }
    }

    let outcome = match (termination, diagnosis == true_disease) {
        (Termination::EntropyStop, true) => Outcome::Correct,
        (Termination::EntropyStop, false) => Outcome::Incorrect,
        (Termination::Timeout, _) => Outcome::Timeout,
    };
    if let Some(last) = transitions.last_mut() {
        last.reward += cfg.reward.mu * terminal_reward_rp(outcome, &cfg.reward);
    }
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    for (t, r) in transitions.iter_mut().zip(discounted_returns(&rewards, cfg.gamma)) {
        t.return_ = r;
    }

    Ok(EpisodeRecord {
        true_disease,
        turns: transitions.len(),
        transitions,
        final_entropy: h_prev,
        final_state: state,
        initial_entropy: h0,
        entropies,
        diagnosis,
        termination,
        outcome,
        positives_found,
    })
}

/// One row of the training curves, written once per window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub window: usize,
    pub episodes: usize,
    pub beta: f64,
    pub mean_return: f64,
    pub accuracy: f64,
    pub mean_turns: f64,
    pub policy_entropy: f64,
    pub classifier_loss: f64,
    pub threshold_mean: f64,
    pub threshold_std: f64,
}

pub type TrainingCurves = Vec<CurveRow>;

pub fn write_curves_csv(curves: &[CurveRow], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curves {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn curves_to_csv_string(curves: &[CurveRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in curves {
        w.serialize(row).expect("curve rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Threshold updates applied at one window boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLogEntry {
    pub window: usize,
    pub update: ThresholdUpdate,
    /// Every episode in the group stopped on the entropy criterion.
    pub entropy_terminated: bool,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curves: TrainingCurves,
    pub threshold_log: Vec<ThresholdLogEntry>,
}

/// Incremental driver of the training loop.
pub struct Trainer<'a> {
    kb: &'a KnowledgeBase,
    cfg: TrainConfig,
    policy: Policy,
    classifier: Classifier,
    table: ThresholdTable,
    window: usize,
    episodes_done: usize,
    baseline: f64,
    curves: TrainingCurves,
    threshold_log: Vec<ThresholdLogEntry>,
}

impl<'a> Trainer<'a> {
    pub fn new(kb: &'a KnowledgeBase, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let seed = cfg.master_seed;
        let policy = Policy::glorot(
            &cfg.network.policy_dims(kb),
            &mut stream_rng(seed, Stream::PolicyInit, 0, 0),
        )?;
        let classifier = Classifier::glorot(
            &cfg.network.classifier_dims(kb),
            &mut stream_rng(seed, Stream::ClassifierInit, 0, 0),
        )?;
        let table = cfg.thresholds.build(kb.n_diseases())?;
        Ok(Self {
            kb,
            cfg,
            policy,
            classifier,
            table,
            window: 0,
            episodes_done: 0,
            baseline: 0.0,
            curves: Vec::new(),
            threshold_log: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.episodes_done >= self.cfg.total_episodes
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn table(&self) -> &ThresholdTable {
        &self.table
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Collects one window of episodes on the current snapshot, then
    /// updates all three components.
    pub fn run_window(&mut self) -> Result<&CurveRow, TrainError> {
        let window = self.window;
        self.run_window_inner(window)
            .map_err(|e| TrainError::Window {
                window,
                source: Box::new(e),
            })?;
        Ok(self.curves.last().expect("row pushed"))
    }

    fn collect(&self, window: usize, count: usize) -> Result<Vec<EpisodeRecord>, TrainError> {
        (0..count)
            .map(|i| {
                let mut rng = stream_rng(self.cfg.master_seed, Stream::Episode, window as u64, i as u64);
                let patient = simulate(self.kb, &mut rng, &self.cfg.sim)?;
                run_episode(
                    &patient,
                    self.kb,
                    &self.policy,
                    &self.classifier,
                    &self.table,
                    &self.cfg,
                    ActionSelection::Sample,
                    &mut rng,
                )
            })
            .collect()
    }

    fn minibatches<T: Clone>(&self, items: Vec<T>, size: Option<usize>, salt: u64) -> Vec<Vec<T>> {
        match size {
            None => vec![items],
            Some(size) => {
                let mut rng = stream_rng(self.cfg.master_seed, Stream::Minibatch, self.window as u64, salt);
                let mut items = items;
                items.shuffle(&mut rng);
                items.chunks(size).map(<[T]>::to_vec).collect()
            }
        }
    }

    fn run_window_inner(&mut self, window: usize) -> Result<(), TrainError> {
        let count = self
            .cfg
            .update_interval_episodes
            .min(self.cfg.total_episodes.saturating_sub(self.episodes_done))
            .max(1);
        let episodes = self.collect(window, count)?;
        let beta = beta_schedule(window, &self.cfg);

        // Policy.
        let transitions: Vec<TransitionSample> = episodes.iter().flat_map(|e| e.transitions.iter().cloned()).collect();
        let mut entropy_sum = 0.0;
        let mut entropy_count = 0usize;
        if !transitions.is_empty() {
            let baseline = if self.cfg.use_baseline { self.baseline } else { 0.0 };
            let n_transitions = transitions.len();
            for batch in self.minibatches(transitions, self.cfg.policy_minibatch, 0) {
                let diag = self.policy.reinforce_update(&batch, self.cfg.policy_lr, beta, baseline)?;
                entropy_sum += diag.policy_entropy * batch.len() as f64;
                entropy_count += batch.len();
            }
            debug_assert_eq!(entropy_count, n_transitions);
        }
        let mean_return = episodes.iter().map(EpisodeRecord::episode_return).sum::<f64>() / episodes.len() as f64;
        if self.cfg.use_baseline {
            let m = self.cfg.baseline_momentum;
            self.baseline = if window == 0 { mean_return } else { m * self.baseline + (1.0 - m) * mean_return };
        }

        // Classifier.
        let samples: Vec<ClassifierSample> = episodes
            .iter()
            .flat_map(|e| {
                e.visited_states().map(|s| ClassifierSample {
                    state: s.clone(),
                    label: e.true_disease,
                })
            })
            .collect();
        let n_samples = samples.len();
        let mut loss_sum = 0.0;
        for batch in self.minibatches(samples, self.cfg.classifier_minibatch, 1) {
            loss_sum += self.classifier.fit_batch(&batch, self.cfg.classifier_lr)? * batch.len() as f64;
        }

        // Thresholds.
        let correct: Vec<&EpisodeRecord> = episodes.iter().filter(|e| e.is_correct()).collect();
        let pairs: Vec<(usize, f64)> = correct.iter().map(|e| (e.diagnosis, e.final_entropy)).collect();
        let mut all_stopped: BTreeMap<usize, bool> = BTreeMap::new();
        for e in &correct {
            let flag = all_stopped.entry(e.diagnosis).or_insert(true);
            *flag &= e.termination == Termination::EntropyStop;
        }
        let updates = if self.cfg.thresholds.per_episode {
            self.table.sequential_update(&pairs)
        } else {
            self.table.batch_update(&pairs)
        };
        for (i, update) in updates.into_iter().enumerate() {
            let entropy_terminated = if self.cfg.thresholds.per_episode {
                correct[i].termination == Termination::EntropyStop
            } else {
                all_stopped[&update.disease]
            };
            self.threshold_log.push(ThresholdLogEntry {
                window,
                update,
                entropy_terminated,
            });
        }

        let summary = self.table.summary();
        let n = episodes.len() as f64;
        self.curves.push(CurveRow {
            window,
            episodes: episodes.len(),
            beta,
            mean_return,
            accuracy: correct.len() as f64 / n,
            mean_turns: episodes.iter().map(|e| e.turns as f64).sum::<f64>() / n,
            policy_entropy: if entropy_count > 0 { entropy_sum / entropy_count as f64 } else { 0.0 },
            classifier_loss: loss_sum / n_samples.max(1) as f64,
            threshold_mean: summary.mean,
            threshold_std: summary.std,
        });
        self.episodes_done += episodes.len();
        self.window += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.kb,
            self.policy.clone(),
            self.classifier.clone(),
            self.table.clone(),
            self.cfg.clone(),
            self.window,
        )
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            curves: self.curves,
            threshold_log: self.threshold_log,
        }
    }
}

/// Runs the whole training schedule.
pub fn train(kb: &KnowledgeBase, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(kb, cfg.clone())?;
    while !trainer.is_done() {
        let row = trainer.run_window()?;
        log::debug!(
            "window {} acc {:.3} turns {:.2} return {:.3} K {:.3}",
            row.window,
            row.accuracy,
            row.mean_turns,
            row.mean_return,
            row.threshold_mean
        );
    }
    Ok(trainer.finish())
}
