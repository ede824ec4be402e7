//! Synthetic corpora from a first-order Markov grammar.
//!
//! Every content symbol has `K` permitted successors. A fraction of symbols are
//! pair heads that are always followed by one fixed partner, which plays the
//! role of a multi-character word: removing half of it leaves a gap that only
//! one symbol can fill.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::oracle::PredictionOracle;
use crate::vocab::{is_content, TokenId, Vocab, FIRST_CONTENT, NUM_SPECIAL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    /// Number of content symbols.
    pub vocab_size: usize,
    pub successors_per_symbol: usize,
    pub pair_head_fraction: f64,
    /// Inclusive sentence length bounds.
    pub length_range: (usize, usize),
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            successors_per_symbol: 4,
            pair_head_fraction: 0.2,
            length_range: (10, 60),
            seed: 7,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.successors_per_symbol < 1 || self.vocab_size <= self.successors_per_symbol {
            return config_err(format!(
                "need vocab_size ({}) > successors_per_symbol ({}) >= 1",
                self.vocab_size, self.successors_per_symbol
            ));
        }
        if !(0.0..=1.0).contains(&self.pair_head_fraction) {
            return config_err("pair_head_fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.length_range;
        if lo < 2 || hi < lo {
            return config_err(format!("invalid length range ({lo}, {hi})"));
        }
        // Heads draw partners from the remaining symbols.
        if self.n_heads() >= self.vocab_size {
            return config_err("pair_head_fraction leaves no partner symbols");
        }
        Ok(())
    }

    fn n_heads(&self) -> usize {
        (self.pair_head_fraction * self.vocab_size as f64).round() as usize
    }
}

/// Transition table generated from a [`GrammarConfig`].
#[derive(Clone, Debug)]
pub struct Grammar {
    config: GrammarConfig,
    successors: Vec<Vec<TokenId>>,
    partner: Vec<Option<TokenId>>,
}

impl Grammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        config.validate()?;
        let n = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let content: Vec<TokenId> = (0..n).map(|i| FIRST_CONTENT + i as TokenId).collect();

        let mut shuffled = content.clone();
        shuffled.shuffle(&mut rng);
        let n_heads = config.n_heads();
        let (heads, others) = shuffled.split_at(n_heads);

        let mut partner = vec![None; n];
        for &h in heads {
            let p = *others.choose(&mut rng).expect("validated: partners exist");
            partner[(h - FIRST_CONTENT) as usize] = Some(p);
        }

        let mut successors = Vec::with_capacity(n);
        for i in 0..n {
            let mut row: Vec<TokenId> = content
                .choose_multiple(&mut rng, config.successors_per_symbol)
                .copied()
                .collect();
            if let Some(p) = partner[i] {
                if !row.contains(&p) {
                    row[0] = p;
                }
            }
            row.sort_unstable();
            successors.push(row);
        }
        Ok(Self {
            config,
            successors,
            partner,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    /// Full vocabulary size including special tokens.
    pub fn total_vocab_size(&self) -> usize {
        self.config.vocab_size + NUM_SPECIAL
    }

    pub fn successors(&self, id: TokenId) -> &[TokenId] {
        &self.successors[(id - FIRST_CONTENT) as usize]
    }

    pub fn partner(&self, id: TokenId) -> Option<TokenId> {
        self.partner[(id - FIRST_CONTENT) as usize]
    }

    pub fn is_pair_head(&self, id: TokenId) -> bool {
        self.partner(id).is_some()
    }

    pub fn is_permitted(&self, from: TokenId, to: TokenId) -> bool {
        self.successors(from).binary_search(&to).is_ok()
    }

    /// Symbols the chain can actually emit after `prev`.
    fn emissions(&self, prev: TokenId) -> Vec<TokenId> {
        match self.partner(prev) {
            Some(p) => vec![p],
            None => self.successors(prev).to_vec(),
        }
    }

    /// Samples `n` sentences. Deterministic in `(grammar, seed)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_sentence(&mut rng)).collect()
    }

    fn sample_sentence(&self, rng: &mut impl Rng) -> Vec<TokenId> {
        let (lo, hi) = self.config.length_range;
        let len = rng.random_range(lo..=hi);
        'attempt: loop {
            let mut s = Vec::with_capacity(len);
            let first = FIRST_CONTENT + rng.random_range(0..self.config.vocab_size) as TokenId;
            s.push(first);
            while s.len() < len {
                let prev = *s.last().unwrap();
                let mut options = self.emissions(prev);
                // A head may not end the sentence, its partner would be cut off.
                if s.len() == len - 1 {
                    options.retain(|&t| !self.is_pair_head(t));
                }
                match options.choose(rng) {
                    Some(&t) => s.push(t),
                    None => continue 'attempt,
                }
            }
            return s;
        }
    }
}

/// The grammar proposes what the chain would emit after the token left of the
/// mask. Right context is ignored, so proposals are plausible but usually break
/// the following transition.
impl PredictionOracle for Grammar {
    fn masked_distribution(&self, seq: &[TokenId], position: usize) -> Result<Vec<f64>> {
        if position >= seq.len() {
            return input_err(format!(
                "mask position {position} outside sequence of length {}",
                seq.len()
            ));
        }
        let mut dist = vec![0.0; self.total_vocab_size()];
        let candidates = match position.checked_sub(1).map(|p| seq[p]) {
            Some(prev) if is_content(prev) && (prev as usize) < dist.len() => {
                self.emissions(prev)
            }
            _ => (0..self.config.vocab_size)
                .map(|i| FIRST_CONTENT + i as TokenId)
                .collect(),
        };
        let w = 1.0 / candidates.len() as f64;
        for t in candidates {
            dist[t as usize] += w;
        }
        Ok(dist)
    }
}

/// Samples `n_sentences` from the grammar defined by `cfg`, using `cfg.seed`
/// for both the transition table and the sentences.
pub fn generate_corpus(cfg: &GrammarConfig, n_sentences: usize) -> Result<Vec<Vec<TokenId>>> {
    let grammar = Grammar::new(cfg.clone())?;
    Ok(grammar.sample(n_sentences, cfg.seed))
}

pub fn write_corpus(path: impl AsRef<Path>, vocab: &Vocab, corpus: &[Vec<TokenId>]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in corpus {
        writeln!(w, "{}", vocab.decode(s))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one sentence per non-blank line.
pub fn read_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ids = vocab.encode(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ids);
    }
    Ok(out)
}
