//! Detection and correction metrics, threshold sweeps and timing.

mod bench;
mod grid;
mod metrics;

pub use bench::{benchmark, BenchMode, BenchStats};
pub use grid::{default_grid, linear_grid, log_grid, logit_grid, parse_grid};
pub use metrics::{correction_metrics, detection_metrics, Metrics};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{score_sentence, Method, ScoreOptions};
use crate::dataset::{EvalRecord, Task};
use crate::error::{input_err, Result};
use crate::model::ModelState;
use crate::scoring::SentenceScores;

/// Scores every source sentence of an eval set.
pub fn score_eval_set(
    records: &[EvalRecord],
    method: Method,
    task: Task,
    model: &ModelState,
    opts: &ScoreOptions,
) -> Result<Vec<SentenceScores>> {
    records
        .par_iter()
        .map(|r| score_sentence(method, task, &r.source, model, opts))
        .collect()
}

/// Detection metrics, plus correction metrics on the insertion task when the
/// scores carry candidates.
pub fn evaluate_scores(
    scores: &[SentenceScores],
    records: &[EvalRecord],
    task: Task,
    threshold: f64,
) -> Result<(Metrics, Option<Metrics>)> {
    let preds: Vec<Vec<usize>> = scores.iter().map(|s| s.flagged(threshold)).collect();
    let golds: Vec<Vec<usize>> = records.iter().map(|r| r.gold_indices(task)).collect();
    let det = detection_metrics(&preds, &golds)?;
    let corr = if task == Task::Insertion && scores.iter().any(|s| s.candidates.iter().any(|c| !c.is_empty())) {
        let pc: Vec<_> = scores.iter().map(|s| s.corrections(threshold)).collect();
        let gc: Vec<_> = records.iter().map(EvalRecord::gold_corrections).collect();
        Some(correction_metrics(&pc, &gc)?)
    } else {
        None
    };
    Ok((det, corr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the best F1; ties go to the smaller threshold.
    pub best: usize,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }

    pub fn best_threshold(&self) -> f64 {
        self.best_point().threshold
    }
}

/// Detection metrics at each threshold of `grid` from precomputed scores.
pub fn sweep_scores(
    scores: &[SentenceScores],
    golds: &[Vec<usize>],
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return input_err("empty threshold grid");
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return input_err(format!("threshold {t} outside (0, 1)"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &threshold in grid {
        let preds: Vec<Vec<usize>> = scores.iter().map(|s| s.flagged(threshold)).collect();
        points.push(SweepPoint {
            threshold,
            metrics: detection_metrics(&preds, golds)?,
        });
    }
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        let b = &points[best];
        if p.metrics.f1 > b.metrics.f1 || (p.metrics.f1 == b.metrics.f1 && p.threshold < b.threshold) {
            best = i;
        }
    }
    Ok(SweepResult { points, best })
}

/// Scores the dev set once and evaluates every threshold in `grid`.
pub fn sweep_thresholds(
    model: &ModelState,
    dev: &[EvalRecord],
    task: Task,
    method: Method,
    opts: &ScoreOptions,
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return input_err("empty threshold grid");
    }
    let scores = score_eval_set(dev, method, task, model, opts)?;
    let golds: Vec<Vec<usize>> = dev.iter().map(|r| r.gold_indices(task)).collect();
    sweep_scores(&scores, &golds, grid)
}
