//! Detection baselines that read a plain masked-LM model, plus a single
//! entry point that scores a sentence with any method.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::top_content;
use crate::dataset::Task;
use crate::error::{config_err, input_err, Error, Result};
use crate::inference::{deletion_scores, insertion_scores, insertion_scores_fast, InsertionMode};
use crate::model::{probs_at_rows, ModelState};
use crate::scoring::{Candidate, FlagRule, SentenceScores};
use crate::vocab::{TokenId, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The `[NULL]` detector.
    Main,
    SubstitutedMask,
    NoMask,
    InsertedMask,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Main,
        Method::SubstitutedMask,
        Method::NoMask,
        Method::InsertedMask,
    ];

    pub fn supports(self, task: Task) -> bool {
        !(self == Method::InsertedMask && task == Task::Deletion)
    }

    pub fn is_baseline(self) -> bool {
        self != Method::Main
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Main => "main",
            Method::SubstitutedMask => "substituted-mask",
            Method::NoMask => "no-mask",
            Method::InsertedMask => "inserted-mask",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?} (expected main, substituted-mask, no-mask or inserted-mask)"
                ))
            })
    }
}

fn check_index(s: &[TokenId], i: usize, limit: usize, what: &str) -> Result<()> {
    if s.is_empty() {
        return input_err("empty sentence");
    }
    if i >= limit {
        return input_err(format!("{what} {i} outside 0..{limit}"));
    }
    Ok(())
}

/// Probability of the original token at `i` with that token replaced by
/// `[MASK]`.
pub fn score_substituted_mask(s: &[TokenId], i: usize, model: &ModelState) -> Result<f64> {
    check_index(s, i, s.len(), "position")?;
    let mut masked = s.to_vec();
    masked[i] = MASK;
    Ok(probs_at_rows(model, &masked, &[i])?[0][s[i] as usize])
}

/// Probability of the original token at `i` on the unmasked sentence.
pub fn score_no_mask(s: &[TokenId], i: usize, model: &ModelState) -> Result<f64> {
    check_index(s, i, s.len(), "position")?;
    Ok(probs_at_rows(model, s, &[i])?[0][s[i] as usize])
}

/// Highest content-word probability at a `[MASK]` inserted at `gap`.
pub fn score_inserted_mask(s: &[TokenId], gap: usize, model: &ModelState) -> Result<f64> {
    check_index(s, gap, s.len() + 1, "gap")?;
    let mut seq = s.to_vec();
    seq.insert(gap, MASK);
    let dist = probs_at_rows(model, &seq, &[gap])?.remove(0);
    Ok(top_content(&dist, 1).first().map_or(0.0, |c| c.1))
}

/// Position scores for one of the token-scoring baselines. On the insertion
/// task, position `g` stands for gap `g` (the gap before it).
fn token_scores(s: &[TokenId], model: &ModelState, masked: bool, task: Task) -> Result<SentenceScores> {
    let n = s.len();
    let scores: Vec<f64> = if masked {
        (0..n)
            .into_par_iter()
            .map(|i| score_substituted_mask(s, i, model))
            .collect::<Result<_>>()?
    } else {
        let rows: Vec<usize> = (0..n).collect();
        probs_at_rows(model, s, &rows)?
            .iter()
            .zip(s)
            .map(|(d, &t)| d[t as usize])
            .collect()
    };
    Ok(SentenceScores {
        indices: (0..n).collect(),
        scores,
        rule: FlagRule::Below,
        run_tokens: (task == Task::Deletion).then(|| s.to_vec()),
        candidates: vec![Vec::new(); n],
        forward_passes: if masked { n } else { 1 },
    })
}

fn inserted_mask_scores(s: &[TokenId], model: &ModelState, boundaries: bool) -> Result<SentenceScores> {
    let gaps: Vec<usize> = if boundaries {
        (0..=s.len()).collect()
    } else {
        (1..s.len()).collect()
    };
    let per_gap: Vec<(f64, Vec<Candidate>)> = gaps
        .par_iter()
        .map(|&g| {
            let mut seq = s.to_vec();
            seq.insert(g, MASK);
            let dist = probs_at_rows(model, &seq, &[g])?.remove(0);
            let best: Vec<Candidate> = top_content(&dist, 1)
                .into_iter()
                .map(|(token, probability)| Candidate { token, probability })
                .collect();
            Ok((best.first().map_or(0.0, |c| c.probability), best))
        })
        .collect::<Result<_>>()?;
    let (scores, candidates) = per_gap.into_iter().unzip();
    Ok(SentenceScores {
        forward_passes: gaps.len(),
        indices: gaps,
        scores,
        rule: FlagRule::Above,
        run_tokens: None,
        candidates,
    })
}

/// Options that affect how a method scores a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreOptions {
    pub mode: InsertionMode,
    pub top_k: usize,
    pub include_boundary_gaps: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            mode: InsertionMode::PerGap,
            top_k: 5,
            include_boundary_gaps: true,
        }
    }
}

/// Threshold-independent scores of `s` for `task` under `method`. The main
/// method expects a `[NULL]`-trained model, the baselines a plain one.
pub fn score_sentence(
    method: Method,
    task: Task,
    s: &[TokenId],
    model: &ModelState,
    opts: &ScoreOptions,
) -> Result<SentenceScores> {
    if !method.supports(task) {
        return config_err(format!("method {method} does not apply to the {task} task"));
    }
    if s.is_empty() {
        return input_err("empty sentence");
    }
    match (method, task) {
        (Method::Main, Task::Insertion) => match opts.mode {
            InsertionMode::PerGap => insertion_scores(s, model, opts.top_k, opts.include_boundary_gaps),
            InsertionMode::Fast => insertion_scores_fast(s, model, opts.top_k, opts.include_boundary_gaps),
        },
        (Method::Main, Task::Deletion) => deletion_scores(s, model),
        (Method::SubstitutedMask, _) => token_scores(s, model, true, task),
        (Method::NoMask, _) => token_scores(s, model, false, task),
        (Method::InsertedMask, _) => inserted_mask_scores(s, model, opts.include_boundary_gaps),
    }
}
