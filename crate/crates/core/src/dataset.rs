//! Error injection and the evaluation-set file format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, Edit, EditSet};
use crate::corpus::Grammar;
use crate::corruption::mask_and_generate;
use crate::error::{input_err, Error, Result};
use crate::oracle::PredictionOracle;
use crate::vocab::{is_content, TokenId, Vocab, FIRST_CONTENT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// A word is missing and must be inserted at a gap.
    Insertion,
    /// A superfluous word is present and must be deleted.
    Deletion,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Insertion => "insertion",
            Task::Deletion => "deletion",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "insertion" => Ok(Task::Insertion),
            "deletion" => Ok(Task::Deletion),
            other => Err(format!("unknown task {other:?} (expected insertion|deletion)")),
        }
    }
}

/// One annotated correction on an erroneous sentence. Gap `g` sits before token `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GoldEdit {
    Insert { gap: usize, token: TokenId },
    Delete { position: usize },
}

impl GoldEdit {
    pub fn index(&self) -> usize {
        match *self {
            GoldEdit::Insert { gap, .. } => gap,
            GoldEdit::Delete { position } => position,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            GoldEdit::Insert { .. } => Task::Insertion,
            GoldEdit::Delete { .. } => Task::Deletion,
        }
    }

    fn check_bounds(&self, len: usize) -> Result<()> {
        match *self {
            GoldEdit::Insert { gap, .. } if gap > len => {
                input_err(format!("insert gap {gap} outside 0..={len}"))
            }
            GoldEdit::Delete { position } if position >= len => {
                input_err(format!("delete position {position} outside 0..{len}"))
            }
            _ => Ok(()),
        }
    }
}

/// Applies gold edits to an erroneous sentence.
pub fn apply_gold(sentence: &[TokenId], golds: &[GoldEdit]) -> Result<Vec<TokenId>> {
    let mut edits = Vec::with_capacity(golds.len());
    for g in golds {
        g.check_bounds(sentence.len())?;
        edits.push(match *g {
            GoldEdit::Insert { gap, token } => Edit::Insert { gap, token },
            GoldEdit::Delete { position } => Edit::Delete {
                position,
                token: sentence[position],
            },
        });
    }
    align::apply_edits(sentence, &EditSet::new(edits)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    /// The erroneous sentence.
    pub source: Vec<TokenId>,
    pub edits: Vec<GoldEdit>,
}

impl EvalRecord {
    pub fn gold_indices(&self, task: Task) -> Vec<usize> {
        self.edits
            .iter()
            .filter(|e| e.task() == task)
            .map(GoldEdit::index)
            .collect()
    }

    pub fn gold_corrections(&self) -> Vec<(usize, TokenId)> {
        self.edits
            .iter()
            .filter_map(|e| match *e {
                GoldEdit::Insert { gap, token } => Some((gap, token)),
                GoldEdit::Delete { .. } => None,
            })
            .collect()
    }
}

/// Share of spurious tokens drawn by mask-and-generate when an oracle is
/// present; the rest are uniform random. Matches the non-mask part of the
/// training fill mix (0.35 vs 0.15).
pub const PLAUSIBLE_SPURIOUS_SHARE: f64 = 0.7;

/// Builds an erroneous sentence from a clean one.
///
/// For [`Task::Insertion`], `n_errors` tokens are removed and the gold edits say
/// where to put them back. For [`Task::Deletion`], `n_errors` spurious content
/// tokens are added. With an oracle, [`PLAUSIBLE_SPURIOUS_SHARE`] of them come
/// from mask-and-generate, otherwise all are uniform random. Gold edits are
/// sorted, pairwise non-adjacent, and follow the alignment conventions for
/// runs of identical tokens.
pub fn inject_errors(
    s: &[TokenId],
    task: Task,
    n_errors: usize,
    seed: u64,
    vocab_size: usize,
    oracle: Option<&dyn PredictionOracle>,
) -> Result<(Vec<TokenId>, Vec<GoldEdit>)> {
    if n_errors == 0 {
        return input_err("n_errors must be at least 1");
    }
    if vocab_size <= FIRST_CONTENT as usize {
        return input_err("vocabulary has no content tokens");
    }
    if let Some(&bad) = s.iter().find(|&&t| !is_content(t) || t as usize >= vocab_size) {
        return input_err(format!("sentence contains non-content token {bad}"));
    }
    let n = s.len();
    let feasible = match task {
        Task::Insertion => n > n_errors && n + 2 >= 3 * n_errors,
        Task::Deletion => n >= 1 && n + 1 >= n_errors,
    };
    if !feasible {
        return input_err(format!(
            "sentence of length {n} cannot host {n_errors} non-adjacent {task} errors"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let (erroneous, mut edits) = match task {
            Task::Insertion => {
                let picks = spaced_sample(&mut rng, n, n_errors, 3);
                let mut err = Vec::with_capacity(n - n_errors);
                let mut edits = Vec::with_capacity(n_errors);
                for (i, &t) in s.iter().enumerate() {
                    if picks.binary_search(&i).is_ok() {
                        edits.push(Edit::Insert {
                            gap: err.len(),
                            token: t,
                        });
                    } else {
                        err.push(t);
                    }
                }
                (err, edits)
            }
            Task::Deletion => {
                let gaps = spaced_sample(&mut rng, n + 1, n_errors, 1);
                let mut fills = Vec::with_capacity(n_errors);
                for &g in &gaps {
                    fills.push(spurious_token(s, g, &mut rng, vocab_size, oracle)?);
                }
                let mut err = Vec::with_capacity(n + n_errors);
                let mut edits = Vec::with_capacity(n_errors);
                let mut next = 0;
                for pos in 0..=n {
                    while next < gaps.len() && gaps[next] == pos {
                        edits.push(Edit::Delete {
                            position: err.len(),
                            token: fills[next],
                        });
                        err.push(fills[next]);
                        next += 1;
                    }
                    if pos < n {
                        err.push(s[pos]);
                    }
                }
                (err, edits)
            }
        };
        align::normalize_runs(&erroneous, &mut edits);
        if edits.windows(2).all(|w| w[1].index() >= w[0].index() + 2) {
            let golds = align::edits_to_gold(&EditSet::new(edits)?)?;
            return Ok((erroneous, golds));
        }
    }
    input_err("could not place non-adjacent errors in 64 attempts")
}

/// `k` sorted indices from `0..n` with consecutive picks at least `spacing` apart.
fn spaced_sample(rng: &mut impl Rng, n: usize, k: usize, spacing: usize) -> Vec<usize> {
    let slack = (spacing - 1) * (k - 1);
    let pool = n - slack;
    let mut picks = rand::seq::index::sample(rng, pool, k).into_vec();
    picks.sort_unstable();
    for (j, p) in picks.iter_mut().enumerate() {
        *p += j * (spacing - 1);
    }
    picks
}

fn spurious_token(
    s: &[TokenId],
    gap: usize,
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    oracle: Option<&dyn PredictionOracle>,
) -> Result<TokenId> {
    let plausible = rng.random_bool(PLAUSIBLE_SPURIOUS_SHARE);
    match oracle {
        Some(o) if plausible => mask_and_generate(s, gap, o, 10, rng.random()),
        _ => Ok(rng.random_range(FIRST_CONTENT..vocab_size as TokenId)),
    }
}

/// Per-sentence error counts (one, two, three) in the proportions seen in
/// human-annotated insertion and deletion data.
fn error_count_weights(task: Task) -> [f64; 3] {
    match task {
        Task::Insertion => [3900.0, 874.0, 153.0],
        Task::Deletion => [2612.0, 116.0, 15.0],
    }
}

/// Samples sentences from `grammar` and injects errors, using the grammar as
/// the mask-and-generate oracle for spurious tokens.
pub fn build_eval_set(
    grammar: &Grammar,
    task: Task,
    n_sentences: usize,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let sentences = grammar.sample(n_sentences, seed);
    inject_eval_errors(&sentences, task, seed, grammar.total_vocab_size(), Some(grammar))
}

/// Injects 1 to 3 errors of one kind into each clean sentence, with the
/// per-sentence error count drawn from a fixed distribution.
pub fn inject_eval_errors(
    sentences: &[Vec<TokenId>],
    task: Task,
    seed: u64,
    vocab_size: usize,
    oracle: Option<&dyn PredictionOracle>,
) -> Result<Vec<EvalRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e11a);
    let weights = error_count_weights(task);
    let total: f64 = weights.iter().sum();
    sentences
        .iter()
        .map(|s| {
            let r = rng.random::<f64>() * total;
            let mut k = if r < weights[0] {
                1
            } else if r < weights[0] + weights[1] {
                2
            } else {
                3
            };
            let max_k = match task {
                Task::Insertion => (s.len() + 2) / 3,
                Task::Deletion => s.len() + 1,
            };
            k = k.min(max_k).max(1);
            let seed: u64 = rng.random();
            // Repeated tokens can force adjacent edits; fall back to fewer errors.
            loop {
                match inject_errors(s, task, k, seed, vocab_size, oracle) {
                    Ok((source, edits)) => return Ok(EvalRecord { source, edits }),
                    Err(_) if k > 1 => k -= 1,
                    Err(e) => return Err(e),
                }
            }
        })
        .collect()
}

/// File form of a single edit: `{"kind": "insert"|"delete"|"substitute", "index": i, "token": sym}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub kind: String,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl EditRecord {
    pub fn from_edit(e: &Edit, vocab: &Vocab) -> Self {
        let sym = |t: TokenId| Some(vocab.symbol(t).unwrap_or("[UNK]").to_string());
        match *e {
            Edit::Insert { gap, token } => Self {
                kind: "insert".into(),
                index: gap,
                token: sym(token),
            },
            Edit::Delete { position, .. } => Self {
                kind: "delete".into(),
                index: position,
                token: None,
            },
            Edit::Substitute { position, to, .. } => Self {
                kind: "substitute".into(),
                index: position,
                token: sym(to),
            },
        }
    }

    pub fn from_gold(g: &GoldEdit, vocab: &Vocab) -> Self {
        match *g {
            GoldEdit::Insert { gap, token } => Self::from_edit(&Edit::Insert { gap, token }, vocab),
            GoldEdit::Delete { position } => Self {
                kind: "delete".into(),
                index: position,
                token: None,
            },
        }
    }

    fn to_gold(&self, vocab: &Vocab) -> std::result::Result<GoldEdit, String> {
        match self.kind.as_str() {
            "insert" => {
                let sym = self.token.as_deref().ok_or("insert edit without token")?;
                let token = vocab
                    .id(sym)
                    .filter(|&t| is_content(t))
                    .ok_or_else(|| format!("unknown content symbol {sym:?}"))?;
                Ok(GoldEdit::Insert {
                    gap: self.index,
                    token,
                })
            }
            "delete" => Ok(GoldEdit::Delete {
                position: self.index,
            }),
            other => Err(format!("unsupported edit kind {other:?}")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    source: String,
    edits: Vec<EditRecord>,
}

pub fn save_eval_set(path: impl AsRef<Path>, vocab: &Vocab, records: &[EvalRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = RecordLine {
            source: vocab.decode(&r.source),
            edits: r.edits.iter().map(|g| EditRecord::from_gold(g, vocab)).collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_eval_set(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<EvalRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let source = vocab.encode(&rec.source).map_err(|e| parse_err(e.to_string()))?;
        let mut edits = Vec::with_capacity(rec.edits.len());
        for e in &rec.edits {
            let g = e.to_gold(vocab).map_err(parse_err)?;
            g.check_bounds(source.len())
                .map_err(|e| parse_err(e.to_string()))?;
            edits.push(g);
        }
        out.push(EvalRecord { source, edits });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GrammarConfig;
    use crate::vocab::build_vocab;

    const A: TokenId = 4;
    const B: TokenId = 5;
    const C: TokenId = 6;

    #[test]
    fn insertion_forced_case() {
        let s = [A, B, C];
        let mut seen_middle = false;
        for seed in 0..50 {
            let (err, gold) = inject_errors(&s, Task::Insertion, 1, seed, 8, None).unwrap();
            assert_eq!(apply_gold(&err, &gold).unwrap(), s.to_vec());
            if err == [A, C] {
                assert_eq!(gold, vec![GoldEdit::Insert { gap: 1, token: B }]);
                seen_middle = true;
            }
        }
        assert!(seen_middle);
    }

    #[test]
    fn deletion_forced_case() {
        let s = [A, B];
        let x: TokenId = 7;
        let mut seen = false;
        for seed in 0..200 {
            let (err, gold) = inject_errors(&s, Task::Deletion, 1, seed, 8, None).unwrap();
            assert_eq!(apply_gold(&err, &gold).unwrap(), s.to_vec());
            if err == [A, x, B] {
                assert_eq!(gold, vec![GoldEdit::Delete { position: 1 }]);
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn rejects_short_sentences() {
        assert!(inject_errors(&[A], Task::Insertion, 1, 0, 8, None).is_err());
        assert!(inject_errors(&[A, B, C], Task::Insertion, 2, 0, 8, None).is_err());
        assert!(inject_errors(&[A, B, C, A], Task::Insertion, 2, 0, 8, None).is_ok());
        assert!(inject_errors(&[A, B, C, A, B], Task::Insertion, 2, 0, 8, None).is_ok());
        assert!(inject_errors(&[A, B], Task::Deletion, 0, 0, 8, None).is_err());
    }

    #[test]
    fn golds_sorted_and_spaced() {
        let g = Grammar::new(GrammarConfig::default()).unwrap();
        for task in [Task::Insertion, Task::Deletion] {
            let set = build_eval_set(&g, task, 300, 11).unwrap();
            for r in &set {
                assert!(!r.edits.is_empty());
                for w in r.edits.windows(2) {
                    assert!(w[1].index() >= w[0].index() + 2);
                }
                assert!(r.edits.iter().all(|e| e.task() == task));
            }
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let vocab = build_vocab(10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_eval_set(&p, &vocab).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_gap_rejected() {
        let vocab = build_vocab(10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(
            &p,
            "{\"source\":\"w0 w1\",\"edits\":[{\"kind\":\"insert\",\"index\":2,\"token\":\"w3\"}]}\n\
             {\"source\":\"w0 w1\",\"edits\":[{\"kind\":\"insert\",\"index\":3,\"token\":\"w3\"}]}\n",
        )
        .unwrap();
        let err = load_eval_set(&p, &vocab).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_line_named() {
        let vocab = build_vocab(10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "{\"source\":\"w0\",\"edits\":[]}\nnot json\n").unwrap();
        let err = load_eval_set(&p, &vocab).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
