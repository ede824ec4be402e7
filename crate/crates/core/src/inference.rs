//! Detection and correction with a `[NULL]`-aware model.
//!
//! Insertion errors: a `[MASK]` is placed at a gap and a low `[NULL]`
//! probability there means a word is missing; the same distribution ranks
//! the words to insert. Deletion errors: on the unmasked sentence a high
//! `[NULL]` probability at a position means the word is spurious.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::top_content;
use crate::dataset::Task;
use crate::error::{config_err, input_err, Error, Result};
use crate::model::{probs_at_rows, ModelState};
use crate::scoring::{Candidate, FlagRule, SentenceScores};
use crate::vocab::{TokenId, MASK, NULL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub insertion_threshold: f64,
    pub deletion_threshold: f64,
    pub top_k_corrections: usize,
    pub include_boundary_gaps: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            insertion_threshold: 0.10,
            deletion_threshold: 0.99,
            top_k_corrections: 5,
            include_boundary_gaps: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("insertion_threshold", self.insertion_threshold),
            ("deletion_threshold", self.deletion_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return config_err(format!("{name} = {t} outside (0, 1)"));
            }
        }
        if self.top_k_corrections < 1 {
            return config_err("top_k_corrections must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionMode {
    PerGap,
    Fast,
}

impl std::fmt::Display for InsertionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InsertionMode::PerGap => "per-gap",
            InsertionMode::Fast => "fast",
        })
    }
}

impl std::str::FromStr for InsertionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-gap" => Ok(InsertionMode::PerGap),
            "fast" => Ok(InsertionMode::Fast),
            _ => config_err(format!("unknown mode {s:?} (expected per-gap or fast)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub task: Task,
    /// Set for insertion reports.
    pub mode: Option<InsertionMode>,
    /// Evaluated gaps (insertion) or positions (deletion).
    pub indices: Vec<usize>,
    /// `[NULL]` probability per evaluated index.
    pub null_probability: Vec<f64>,
    pub flagged: Vec<usize>,
    /// Correction candidates per flagged gap (insertion only).
    pub corrections: BTreeMap<usize, Vec<Candidate>>,
    pub forward_passes: usize,
}

fn evaluated_gaps(n: usize, boundaries: bool) -> Vec<usize> {
    if boundaries {
        (0..=n).collect()
    } else {
        (1..n).collect()
    }
}

fn with_mask(s: &[TokenId], gap: usize) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(s.len() + 1);
    v.extend_from_slice(&s[..gap]);
    v.push(MASK);
    v.extend_from_slice(&s[gap..]);
    v
}

fn check_sentence(s: &[TokenId], model: &ModelState) -> Result<()> {
    if s.is_empty() {
        return input_err("empty sentence");
    }
    let v = model.config().vocab_size;
    if let Some(&id) = s.iter().find(|&&id| id as usize >= v) {
        return Err(Error::TokenOutOfRange { id, vocab_size: v });
    }
    Ok(())
}

/// `[NULL]` probability and top-k candidates at every evaluated gap, one
/// forward pass per gap.
pub fn insertion_scores(
    s: &[TokenId],
    model: &ModelState,
    top_k: usize,
    boundaries: bool,
) -> Result<SentenceScores> {
    check_sentence(s, model)?;
    let gaps = evaluated_gaps(s.len(), boundaries);
    let per_gap: Vec<(f64, Vec<Candidate>)> = gaps
        .par_iter()
        .map(|&g| {
            let dist = probs_at_rows(model, &with_mask(s, g), &[g])?.remove(0);
            Ok((dist[NULL as usize], candidates(&dist, top_k)))
        })
        .collect::<Result<_>>()?;
    let (scores, candidates) = per_gap.into_iter().unzip();
    Ok(SentenceScores {
        forward_passes: gaps.len(),
        indices: gaps,
        scores,
        rule: FlagRule::Below,
        run_tokens: None,
        candidates,
    })
}

/// Same quantities as [`insertion_scores`] from a single pass over the
/// sentence with a `[MASK]` in every evaluated gap.
pub fn insertion_scores_fast(
    s: &[TokenId],
    model: &ModelState,
    top_k: usize,
    boundaries: bool,
) -> Result<SentenceScores> {
    check_sentence(s, model)?;
    let gaps = evaluated_gaps(s.len(), boundaries);
    let mut seq = Vec::with_capacity(s.len() + gaps.len());
    let mut rows = Vec::with_capacity(gaps.len());
    let mut next = gaps.iter().peekable();
    for i in 0..=s.len() {
        if next.peek() == Some(&&i) {
            next.next();
            rows.push(seq.len());
            seq.push(MASK);
        }
        if i < s.len() {
            seq.push(s[i]);
        }
    }
    let max_len = model.config().max_len;
    if seq.len() > max_len {
        return Err(Error::TooLong {
            len: seq.len(),
            max_len,
            hint: "; split the sentence into chunks for fast mode",
        });
    }
    let dists = probs_at_rows(model, &seq, &rows)?;
    Ok(SentenceScores {
        indices: gaps,
        scores: dists.iter().map(|d| d[NULL as usize]).collect(),
        rule: FlagRule::Below,
        run_tokens: None,
        candidates: dists.iter().map(|d| candidates(d, top_k)).collect(),
        forward_passes: 1,
    })
}

/// `[NULL]` probability at every position of the unmasked sentence.
pub fn deletion_scores(s: &[TokenId], model: &ModelState) -> Result<SentenceScores> {
    check_sentence(s, model)?;
    let rows: Vec<usize> = (0..s.len()).collect();
    let dists = probs_at_rows(model, s, &rows)?;
    Ok(SentenceScores {
        scores: dists.iter().map(|d| d[NULL as usize]).collect(),
        indices: rows,
        rule: FlagRule::Above,
        run_tokens: Some(s.to_vec()),
        candidates: vec![Vec::new(); s.len()],
        forward_passes: 1,
    })
}

fn candidates(dist: &[f64], k: usize) -> Vec<Candidate> {
    top_content(dist, k)
        .into_iter()
        .map(|(token, probability)| Candidate { token, probability })
        .collect()
}

fn insertion_report(sc: SentenceScores, threshold: f64, mode: InsertionMode) -> DetectionReport {
    let flagged = sc.flagged(threshold);
    let corrections = flagged
        .iter()
        .map(|&g| (g, sc.candidates_at(g).to_vec()))
        .collect();
    DetectionReport {
        task: Task::Insertion,
        mode: Some(mode),
        indices: sc.indices,
        null_probability: sc.scores,
        flagged,
        corrections,
        forward_passes: sc.forward_passes,
    }
}

pub fn detect_insertions(
    s: &[TokenId],
    model: &ModelState,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let sc = insertion_scores(s, model, cfg.top_k_corrections, cfg.include_boundary_gaps)?;
    Ok(insertion_report(sc, cfg.insertion_threshold, InsertionMode::PerGap))
}

pub fn detect_insertions_fast(
    s: &[TokenId],
    model: &ModelState,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let sc = insertion_scores_fast(s, model, cfg.top_k_corrections, cfg.include_boundary_gaps)?;
    Ok(insertion_report(sc, cfg.insertion_threshold, InsertionMode::Fast))
}

pub fn detect_deletions(
    s: &[TokenId],
    model: &ModelState,
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let sc = deletion_scores(s, model)?;
    Ok(DetectionReport {
        task: Task::Deletion,
        mode: None,
        flagged: sc.flagged(cfg.deletion_threshold),
        indices: sc.indices,
        null_probability: sc.scores,
        corrections: BTreeMap::new(),
        forward_passes: 1,
    })
}

/// The `k` most probable words to insert at `gap`.
pub fn correct_insertion(
    s: &[TokenId],
    gap: usize,
    model: &ModelState,
    k: usize,
) -> Result<Vec<Candidate>> {
    if k < 1 {
        return input_err("k must be at least 1");
    }
    check_sentence(s, model)?;
    if gap > s.len() {
        return input_err(format!("gap {gap} outside 0..={}", s.len()));
    }
    let dist = probs_at_rows(model, &with_mask(s, gap), &[gap])?.remove(0);
    Ok(candidates(&dist, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSentence {
    pub index: usize,
    pub score: f64,
    pub insertion_warnings: Vec<usize>,
    pub deletion_warnings: Vec<usize>,
}

/// Error score of one sentence: the larger of the worst insertion margin
/// `(θi − p)⁺/θi` and the worst deletion margin `(p − θd)⁺/(1 − θd)`.
pub fn sentence_error_score(ins: &SentenceScores, del: &SentenceScores, cfg: &DetectorConfig) -> f64 {
    let ti = cfg.insertion_threshold;
    let td = cfg.deletion_threshold;
    let ins_term = ins
        .scores
        .iter()
        .map(|&p| (ti - p).max(0.0) / ti)
        .fold(0.0, f64::max);
    let del_term = del
        .scores
        .iter()
        .map(|&p| (p - td).max(0.0) / (1.0 - td))
        .fold(0.0, f64::max);
    ins_term.max(del_term)
}

/// Orders sentences by descending error score (ties by index).
pub fn rank_sentences(
    corpus: &[Vec<TokenId>],
    model: &ModelState,
    cfg: &DetectorConfig,
) -> Result<Vec<RankedSentence>> {
    cfg.validate()?;
    let mut ranked: Vec<RankedSentence> = corpus
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let ins = insertion_scores(s, model, 1, cfg.include_boundary_gaps)?;
            let del = deletion_scores(s, model)?;
            Ok(RankedSentence {
                index,
                score: sentence_error_score(&ins, &del, cfg),
                insertion_warnings: ins.flagged(cfg.insertion_threshold),
                deletion_warnings: del.flagged(cfg.deletion_threshold),
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(ranked)
}
