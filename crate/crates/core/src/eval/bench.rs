use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::inference::{deletion_scores, insertion_scores, insertion_scores_fast};
use crate::model::ModelState;
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    Deletion,
    InsertionPerGap,
    InsertionFast,
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchMode::Deletion => "deletion",
            BenchMode::InsertionPerGap => "insertion-per-gap",
            BenchMode::InsertionFast => "insertion-fast",
        })
    }
}

impl std::str::FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deletion" => Ok(BenchMode::Deletion),
            "insertion-per-gap" => Ok(BenchMode::InsertionPerGap),
            "insertion-fast" => Ok(BenchMode::InsertionFast),
            _ => config_err(format!(
                "unknown bench mode {s:?} (expected deletion, insertion-per-gap or insertion-fast)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub mode: BenchMode,
    pub sentences: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Forward passes summed over the timed sentences.
    pub forward_passes: usize,
}

/// Times detection per sentence. The first `warmup` sentences are run but
/// not measured.
pub fn benchmark(
    model: &ModelState,
    sentences: &[Vec<TokenId>],
    mode: BenchMode,
    warmup: usize,
) -> Result<BenchStats> {
    if sentences.len() <= warmup {
        return input_err("benchmark needs more sentences than warmup iterations");
    }
    let run = |s: &[TokenId]| -> Result<usize> {
        Ok(match mode {
            BenchMode::Deletion => deletion_scores(s, model)?.forward_passes,
            BenchMode::InsertionPerGap => insertion_scores(s, model, 1, true)?.forward_passes,
            BenchMode::InsertionFast => insertion_scores_fast(s, model, 1, true)?.forward_passes,
        })
    };
    for s in &sentences[..warmup] {
        run(s)?;
    }
    let mut times = Vec::with_capacity(sentences.len() - warmup);
    let mut passes = 0;
    for s in &sentences[warmup..] {
        let t = Instant::now();
        passes += run(s)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median_ms = if times.len() % 2 == 0 {
        (times[mid - 1] + times[mid]) / 2.0
    } else {
        times[mid]
    };
    Ok(BenchStats {
        mode,
        sentences: times.len(),
        mean_ms,
        median_ms,
        forward_passes: passes,
    })
}
