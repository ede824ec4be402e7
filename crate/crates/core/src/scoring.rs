//! Threshold-independent per-sentence scores shared by the main detector and
//! the baselines. Flagging at a threshold is a pure function of these.

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

/// Which side of the threshold flags an index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlagRule {
    /// Flag when `score < threshold`.
    Below,
    /// Flag when `score > threshold`.
    Above,
}

impl FlagRule {
    pub fn flags(self, score: f64, threshold: f64) -> bool {
        match self {
            FlagRule::Below => score < threshold,
            FlagRule::Above => score > threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: TokenId,
    pub probability: f64,
}

/// Scores for one sentence: `scores[j]` belongs to gap or position
/// `indices[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceScores {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub rule: FlagRule,
    /// When set, flags inside a run of identical adjacent tokens collapse onto
    /// the run's last position. Holds the sentence.
    pub run_tokens: Option<Vec<TokenId>>,
    /// Correction candidates per index, best first; empty when not applicable.
    pub candidates: Vec<Vec<Candidate>>,
    pub forward_passes: usize,
}

impl SentenceScores {
    pub fn flagged(&self, threshold: f64) -> Vec<usize> {
        let raw: Vec<usize> = self
            .indices
            .iter()
            .zip(&self.scores)
            .filter(|(_, &s)| self.rule.flags(s, threshold))
            .map(|(&i, _)| i)
            .collect();
        match &self.run_tokens {
            Some(tokens) => collapse_runs(tokens, &raw),
            None => raw,
        }
    }

    /// Flagged indices paired with their best candidate. Indices without a
    /// candidate are skipped.
    pub fn corrections(&self, threshold: f64) -> Vec<(usize, TokenId)> {
        let flagged = self.flagged(threshold);
        self.indices
            .iter()
            .zip(&self.candidates)
            .filter(|(i, _)| flagged.binary_search(i).is_ok())
            .filter_map(|(&i, c)| c.first().map(|c| (i, c.token)))
            .collect()
    }

    pub fn candidates_at(&self, index: usize) -> &[Candidate] {
        self.indices
            .iter()
            .position(|&i| i == index)
            .and_then(|j| self.candidates.get(j))
            .map_or(&[], Vec::as_slice)
    }
}

/// Replaces each run of identical adjacent tokens that has any flagged member
/// by the run's last position. `flagged` must be sorted.
pub fn collapse_runs(tokens: &[TokenId], flagged: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(flagged.len());
    for &i in flagged {
        let mut last = i;
        while last + 1 < tokens.len() && tokens[last + 1] == tokens[i] {
            last += 1;
        }
        if out.last() != Some(&last) {
            out.push(last);
        }
    }
    out
}
