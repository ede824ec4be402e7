//! Training-time corruption.
//!
//! In null-aware mode a sample of word slots is split between substitution and
//! insertion. A substituted word becomes `[MASK]` or stays as is and must be
//! predicted back. An inserted word goes right after its chosen word, is filled
//! with `[MASK]`, a random word or a mask-and-generate proposal, and its target
//! is `[NULL]`. Baseline mode is the plain 80/10/10 masked-LM scheme.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::oracle::PredictionOracle;
use crate::vocab::{is_content, TokenId, FIRST_CONTENT, MASK, NULL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub corruption_rate: f64,
    /// Share of corrupted slots that are substitutions; the rest are insertions.
    pub sub_ins_split: f64,
    /// Fill probabilities for inserted tokens: (mask, random, mask-and-generate).
    pub ins_fill_mix: (f64, f64, f64),
    pub sub_mask_prob: f64,
    pub mag_top_k: usize,
    /// When off, the mask-and-generate share goes to random fills.
    pub mag_enabled: bool,
    /// Plain masked-LM corruption: no insertions, 80/10/10 mask/random/keep.
    pub baseline_mode: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            sub_ins_split: 0.5,
            ins_fill_mix: (0.5, 0.15, 0.35),
            sub_mask_prob: 0.5,
            mag_top_k: 10,
            mag_enabled: true,
            baseline_mode: false,
        }
    }
}

impl CorruptionConfig {
    pub fn baseline() -> Self {
        Self {
            baseline_mode: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, r, g) = self.ins_fill_mix;
        for (name, v) in [
            ("corruption_rate", self.corruption_rate),
            ("sub_ins_split", self.sub_ins_split),
            ("sub_mask_prob", self.sub_mask_prob),
            ("ins_fill_mix.mask", m),
            ("ins_fill_mix.random", r),
            ("ins_fill_mix.generate", g),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return config_err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.corruption_rate == 0.0 {
            return config_err("corruption_rate must be positive");
        }
        if ((m + r + g) - 1.0).abs() > 1e-9 {
            return config_err(format!("ins_fill_mix sums to {}, not 1", m + r + g));
        }
        if self.mag_top_k < 1 {
            return config_err("mag_top_k must be at least 1");
        }
        Ok(())
    }

    /// Whether corruption will query the auxiliary oracle.
    pub fn needs_aux(&self) -> bool {
        !self.baseline_mode && self.mag_enabled && self.ins_fill_mix.2 > 0.0
    }

    fn effective_fill_mix(&self) -> (f64, f64, f64) {
        let (m, r, g) = self.ins_fill_mix;
        if self.mag_enabled {
            (m, r, g)
        } else {
            (m, r + g, 0.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FillKind {
    Mask,
    Random,
    Generated,
    /// Substituted word left as is (substitution slots only).
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub original: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    /// Indices into `corrupted`, sorted.
    pub sub_indices: Vec<usize>,
    /// Indices into `corrupted`, sorted.
    pub ins_indices: Vec<usize>,
    /// Target id per corrupted index.
    pub targets: BTreeMap<usize, TokenId>,
    /// How each corrupted index was filled.
    pub fills: BTreeMap<usize, FillKind>,
}

impl CorruptionRecord {
    /// Drops insertion positions and restores substitution targets.
    pub fn reconstruct(&self) -> Vec<TokenId> {
        self.corrupted
            .iter()
            .enumerate()
            .filter(|(i, _)| self.ins_indices.binary_search(i).is_err())
            .map(|(i, &t)| {
                if self.sub_indices.binary_search(&i).is_ok() {
                    self.targets[&i]
                } else {
                    t
                }
            })
            .collect()
    }

    /// Checks every structural invariant of a record.
    pub fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Input(format!("corruption record: {m}")));
        if self.corrupted.len() != self.original.len() + self.ins_indices.len() {
            return fail("length mismatch");
        }
        if self.sub_indices.iter().any(|i| self.ins_indices.contains(i)) {
            return fail("substitution and insertion indices overlap");
        }
        for &i in &self.ins_indices {
            if self.targets.get(&i) != Some(&NULL) {
                return fail("insertion target is not NULL");
            }
        }
        for &i in &self.sub_indices {
            match self.targets.get(&i) {
                Some(&t) if t != NULL => {}
                _ => return fail("substitution target missing or NULL"),
            }
        }
        if self.targets.len() != self.sub_indices.len() + self.ins_indices.len() {
            return fail("targets outside corrupted indices");
        }
        if self.reconstruct() != self.original {
            return fail("reconstruction differs from original");
        }
        Ok(())
    }
}

fn slot_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).max(1)
}

fn random_content(rng: &mut impl Rng, vocab_size: usize) -> TokenId {
    rng.random_range(FIRST_CONTENT..vocab_size as TokenId)
}

/// Corrupts one clean sentence. `vocab_size` counts special tokens.
pub fn corrupt(
    s: &[TokenId],
    cfg: &CorruptionConfig,
    vocab_size: usize,
    aux: Option<&dyn PredictionOracle>,
    seed: u64,
) -> Result<CorruptionRecord> {
    cfg.validate()?;
    if s.is_empty() {
        return input_err("cannot corrupt an empty sentence");
    }
    if let Some(&bad) = s.iter().find(|&&t| !is_content(t) || t as usize >= vocab_size) {
        return input_err(format!("sentence contains non-content token {bad}"));
    }
    if vocab_size <= FIRST_CONTENT as usize {
        return input_err("vocabulary has no content tokens");
    }
    let n = s.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if cfg.baseline_mode {
        let k = slot_count(cfg.corruption_rate, n).min(n);
        let mut picks = rand::seq::index::sample(&mut rng, n, k).into_vec();
        picks.sort_unstable();
        let mut corrupted = s.to_vec();
        let mut targets = BTreeMap::new();
        let mut fills = BTreeMap::new();
        for &i in &picks {
            let r: f64 = rng.random();
            let fill = if r < 0.8 {
                corrupted[i] = MASK;
                FillKind::Mask
            } else if r < 0.9 {
                corrupted[i] = random_content(&mut rng, vocab_size);
                FillKind::Random
            } else {
                FillKind::Keep
            };
            targets.insert(i, s[i]);
            fills.insert(i, fill);
        }
        return Ok(CorruptionRecord {
            original: s.to_vec(),
            corrupted,
            sub_indices: picks,
            ins_indices: Vec::new(),
            targets,
            fills,
        });
    }

    if cfg.needs_aux() && aux.is_none() {
        return input_err("mask-and-generate fill requested without an auxiliary model");
    }

    // Chosen word slots are pairwise non-adjacent.
    let k = slot_count(cfg.corruption_rate, n).min(n.div_ceil(2));
    let pool = n - (k - 1);
    let mut slots = rand::seq::index::sample(&mut rng, pool, k).into_vec();
    slots.sort_unstable();
    for (j, p) in slots.iter_mut().enumerate() {
        *p += j;
    }

    let (mix_mask, mix_random, _) = cfg.effective_fill_mix();
    enum Op {
        Sub(TokenId, FillKind),
        Ins(TokenId, FillKind),
    }
    let mut ops: BTreeMap<usize, Op> = BTreeMap::new();
    for &i in &slots {
        if rng.random_bool(cfg.sub_ins_split) {
            if rng.random_bool(cfg.sub_mask_prob) {
                ops.insert(i, Op::Sub(MASK, FillKind::Mask));
            } else {
                ops.insert(i, Op::Sub(s[i], FillKind::Keep));
            }
        } else {
            let r: f64 = rng.random();
            let (tok, kind) = if r < mix_mask {
                (MASK, FillKind::Mask)
            } else if r < mix_mask + mix_random {
                (random_content(&mut rng, vocab_size), FillKind::Random)
            } else {
                let oracle = aux.ok_or_else(|| {
                    Error::Input("mask-and-generate fill requested without an auxiliary model".into())
                })?;
                let t = mask_and_generate(s, i + 1, oracle, cfg.mag_top_k, rng.random())?;
                (t, FillKind::Generated)
            };
            ops.insert(i, Op::Ins(tok, kind));
        }
    }

    let mut corrupted = Vec::with_capacity(n + ops.len());
    let mut sub_indices = Vec::new();
    let mut ins_indices = Vec::new();
    let mut targets = BTreeMap::new();
    let mut fills = BTreeMap::new();
    for (i, &t) in s.iter().enumerate() {
        match ops.get(&i) {
            Some(Op::Sub(tok, kind)) => {
                let at = corrupted.len();
                corrupted.push(*tok);
                sub_indices.push(at);
                targets.insert(at, t);
                fills.insert(at, *kind);
            }
            Some(Op::Ins(tok, kind)) => {
                corrupted.push(t);
                let at = corrupted.len();
                corrupted.push(*tok);
                ins_indices.push(at);
                targets.insert(at, NULL);
                fills.insert(at, *kind);
            }
            None => corrupted.push(t),
        }
    }
    Ok(CorruptionRecord {
        original: s.to_vec(),
        corrupted,
        sub_indices,
        ins_indices,
        targets,
        fills,
    })
}

/// Places `[MASK]` at `gap` of `s`, asks `aux` for a distribution and returns
/// one of its `top_k` most probable content tokens, uniformly at random.
/// Tokens the oracle gives zero probability are never proposed.
pub fn mask_and_generate(
    s: &[TokenId],
    gap: usize,
    aux: &dyn PredictionOracle,
    top_k: usize,
    seed: u64,
) -> Result<TokenId> {
    if top_k < 1 {
        return input_err("top_k must be at least 1");
    }
    if gap > s.len() {
        return input_err(format!("gap {gap} outside 0..={}", s.len()));
    }
    let mut masked = Vec::with_capacity(s.len() + 1);
    masked.extend_from_slice(&s[..gap]);
    masked.push(MASK);
    masked.extend_from_slice(&s[gap..]);
    let dist = aux.masked_distribution(&masked, gap)?;
    let top = top_content(&dist, top_k);
    if top.is_empty() {
        return input_err("oracle proposed no content token");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(top[rng.random_range(0..top.len())].0)
}

/// The `k` most probable content tokens with positive probability, in
/// descending order (ties broken by lower id).
pub fn top_content(dist: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut cands: Vec<(TokenId, f64)> = dist
        .iter()
        .enumerate()
        .skip(FIRST_CONTENT as usize)
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (i as TokenId, p))
        .collect();
    let by_prob = |a: &(TokenId, f64), b: &(TokenId, f64)| {
        b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
    };
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, by_prob);
        cands.truncate(k);
    }
    cands.sort_by(by_prob);
    cands
}
