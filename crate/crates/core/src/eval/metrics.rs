use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::vocab::TokenId;

/// Micro-averaged counts and ratios. Ratios with a zero denominator are 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // 2PR/(P+R) written on counts: 2TP/(2TP+FP+FN).
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1,
        }
    }
}

fn micro<T: Ord + Clone>(preds: &[Vec<T>], golds: &[Vec<T>]) -> Result<Metrics> {
    if preds.len() != golds.len() {
        return input_err(format!(
            "{} predictions for {} gold sentences",
            preds.len(),
            golds.len()
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<&T> = p.iter().collect();
        let g: BTreeSet<&T> = g.iter().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Position-level metrics over per-sentence flagged and gold index sets.
pub fn detection_metrics(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<Metrics> {
    micro(preds, golds)
}

/// A prediction counts only when both the gap and the word match.
pub fn correction_metrics(
    preds: &[Vec<(usize, TokenId)>],
    golds: &[Vec<(usize, TokenId)>],
) -> Result<Metrics> {
    micro(preds, golds)
}
