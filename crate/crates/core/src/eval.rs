//! Held-out evaluation and the threshold ablation protocols.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::kb::KnowledgeBase;
use crate::patient_sim::simulate;
use crate::rng::{stream_rng, Stream};
use crate::thresholds::{ThresholdInit, ThresholdMode, ThresholdSummary, ThresholdTable};
use crate::trainer::{run_episode, train, ActionSelection, EpisodeRecord, Termination, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_turns: f64,
    pub match_rate: f64,
    pub n_patients: usize,
    pub n_correct: usize,
    pub n_entropy_stops: usize,
    pub threshold_summary: ThresholdSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub selection: ActionSelection,
    pub allow_kb_mismatch: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            selection: ActionSelection::Greedy,
            allow_kb_mismatch: false,
        }
    }
}

/// Mean over episodes of positive findings per inquiry turn. Episodes with
/// no inquiry contribute zero; an empty list gives zero.
pub fn match_rate(episodes: &[EpisodeRecord]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes
        .iter()
        .map(|e| {
            if e.turns == 0 {
                0.0
            } else {
                e.positives_found as f64 / e.turns as f64
            }
        })
        .sum::<f64>()
        / episodes.len() as f64
}

pub fn summarize(episodes: &[EpisodeRecord], table: &ThresholdTable) -> Metrics {
    let n = episodes.len();
    let n_correct = episodes.iter().filter(|e| e.is_correct()).count();
    let denom = n.max(1) as f64;
    Metrics {
        accuracy: n_correct as f64 / denom,
        mean_turns: episodes.iter().map(|e| e.turns as f64).sum::<f64>() / denom,
        match_rate: match_rate(episodes),
        n_patients: n,
        n_correct,
        n_entropy_stops: episodes
            .iter()
            .filter(|e| e.termination == Termination::EntropyStop)
            .count(),
        threshold_summary: table.summary(),
    }
}

/// Runs `n_patients` inference episodes with frozen thresholds and returns
/// the episodes alongside their metrics.
pub fn evaluate_episodes(
    checkpoint: &Checkpoint,
    kb: &KnowledgeBase,
    n_patients: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<(Metrics, Vec<EpisodeRecord>), EvalError> {
    checkpoint.check_kb(kb, opts.allow_kb_mismatch)?;
    let cfg = &checkpoint.config;
    let episodes = (0..n_patients)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Evaluation, 0, i as u64);
            let patient = simulate(kb, &mut rng, &cfg.sim).map_err(TrainError::from)?;
            run_episode(
                &patient,
                kb,
                &checkpoint.policy,
                &checkpoint.classifier,
                &checkpoint.thresholds,
                cfg,
                opts.selection,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok((summarize(&episodes, &checkpoint.thresholds), episodes))
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    kb: &KnowledgeBase,
    n_patients: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Metrics, EvalError> {
    Ok(evaluate_episodes(checkpoint, kb, n_patients, seed, opts)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedMetrics {
    pub runs: Vec<Metrics>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub turns_mean: f64,
    pub turns_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluates on `repeats` consecutive seeds starting at `seed`.
pub fn evaluate_repeated(
    checkpoint: &Checkpoint,
    kb: &KnowledgeBase,
    n_patients: usize,
    seed: u64,
    repeats: usize,
    opts: &EvalOptions,
) -> Result<RepeatedMetrics, EvalError> {
    let runs = (0..repeats as u64)
        .map(|r| evaluate(checkpoint, kb, n_patients, seed + r, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let (accuracy_mean, accuracy_std) = mean_std(&runs.iter().map(|m| m.accuracy).collect::<Vec<_>>());
    let (turns_mean, turns_std) = mean_std(&runs.iter().map(|m| m.mean_turns).collect::<Vec<_>>());
    Ok(RepeatedMetrics {
        runs,
        accuracy_mean,
        accuracy_std,
        turns_mean,
        turns_std,
    })
}

/// Held-out set used by the ablation protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub n_patients: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub mode: ThresholdMode,
    pub metrics: Metrics,
}

fn train_and_evaluate(kb: &KnowledgeBase, cfg: &TrainConfig, eval: &EvalSpec) -> Result<(Checkpoint, Metrics), EvalError> {
    let outcome = train(kb, cfg)?;
    let metrics = evaluate(&outcome.checkpoint, kb, eval.n_patients, eval.seed, &EvalOptions::default())?;
    Ok((outcome.checkpoint, metrics))
}

/// Trains once per fixed threshold and once adaptively, all on the same
/// seeds. The adaptive row comes first.
pub fn fixed_threshold_sweep(
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    thresholds: &[f64],
    eval: &EvalSpec,
) -> Result<Vec<SweepRow>, EvalError> {
    let modes = std::iter::once(ThresholdMode::Adaptive).chain(thresholds.iter().map(|&k| ThresholdMode::Fixed(k)));
    modes
        .map(|mode| {
            let mut run_cfg = cfg.clone();
            run_cfg.thresholds.mode = mode;
            let (_, metrics) = train_and_evaluate(kb, &run_cfg, eval)?;
            let label = match mode {
                ThresholdMode::Adaptive => "adaptive".to_string(),
                ThresholdMode::Fixed(k) => format!("fixed {k}"),
            };
            log::info!("{label}: accuracy {:.4} turns {:.3}", metrics.accuracy, metrics.mean_turns);
            Ok(SweepRow { label, mode, metrics })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRow {
    pub label: String,
    pub init: ThresholdInit,
    pub final_mean: f64,
    pub final_std: f64,
    pub accuracy: f64,
    pub mean_turns: f64,
}

/// One adaptive training run per initial threshold spec.
pub fn init_robustness(
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    inits: &[ThresholdInit],
    eval: &EvalSpec,
) -> Result<Vec<InitRow>, EvalError> {
    inits
        .iter()
        .map(|init| {
            let mut run_cfg = cfg.clone();
            run_cfg.thresholds.init = init.clone();
            run_cfg.thresholds.mode = ThresholdMode::Adaptive;
            let (ckpt, metrics) = train_and_evaluate(kb, &run_cfg, eval)?;
            let summary = ckpt.thresholds.summary();
            log::info!(
                "{}: accuracy {:.4} turns {:.3} K mean {:.4}",
                init.label(),
                metrics.accuracy,
                metrics.mean_turns,
                summary.mean
            );
            Ok(InitRow {
                label: init.label(),
                init: init.clone(),
                final_mean: summary.mean,
                final_std: summary.std,
                accuracy: metrics.accuracy,
                mean_turns: metrics.mean_turns,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCsvRow {
    pub disease_id: usize,
    pub name: String,
    pub k_d: f64,
}

pub fn threshold_rows(table: &ThresholdTable, kb: &KnowledgeBase) -> Vec<ThresholdCsvRow> {
    table
        .values
        .iter()
        .enumerate()
        .map(|(d, &k)| ThresholdCsvRow {
            disease_id: d,
            name: kb.disease_name(d).to_string(),
            k_d: k,
        })
        .collect()
}

pub fn write_thresholds_csv(table: &ThresholdTable, kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in threshold_rows(table, kb) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_thresholds_csv(path: impl AsRef<Path>) -> Result<Vec<ThresholdCsvRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(Into::into)
}

pub fn write_rows_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Flat row for sweep CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub label: String,
    pub accuracy: f64,
    pub mean_turns: f64,
    pub match_rate: f64,
    pub threshold_mean: f64,
    pub threshold_std: f64,
}

impl From<&SweepRow> for SweepCsvRow {
    fn from(row: &SweepRow) -> Self {
        Self {
            label: row.label.clone(),
            accuracy: row.metrics.accuracy,
            mean_turns: row.metrics.mean_turns,
            match_rate: row.metrics.match_rate,
            threshold_mean: row.metrics.threshold_summary.mean,
            threshold_std: row.metrics.threshold_summary.std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitCsvRow {
    pub label: String,
    pub final_mean: f64,
    pub final_std: f64,
    pub accuracy: f64,
    pub mean_turns: f64,
}

impl From<&InitRow> for InitCsvRow {
    fn from(row: &InitRow) -> Self {
        Self {
            label: row.label.clone(),
            final_mean: row.final_mean,
            final_std: row.final_std,
            accuracy: row.accuracy,
            mean_turns: row.mean_turns,
        }
    }
}
