//! Symbol vocabulary with reserved special tokens.
//!
//! Ids `0..4` are reserved for `[PAD]`, `[UNK]`, `[MASK]` and `[NULL]`; content
//! symbols start at [`FIRST_CONTENT`]. `[NULL]` is a prediction class only and
//! never occurs in corpus text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const MASK: TokenId = 2;
pub const NULL: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
pub const FIRST_CONTENT: TokenId = NUM_SPECIAL as TokenId;

pub const SPECIAL_SYMBOLS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[MASK]", "[NULL]"];

#[inline]
pub fn is_content(id: TokenId) -> bool {
    id >= FIRST_CONTENT
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Builds a vocabulary of `n_content_symbols` generated symbols (`w0`, `w1`, ...)
/// after the four special tokens.
pub fn build_vocab(n_content_symbols: usize) -> Result<Vocab> {
    if n_content_symbols < 2 {
        return input_err(format!(
            "need at least 2 content symbols, got {n_content_symbols}"
        ));
    }
    let symbols = SPECIAL_SYMBOLS
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_content_symbols).map(|i| format!("w{i}")))
        .collect();
    Vocab::from_symbols(symbols)
}

impl Vocab {
    /// Specials must occupy ids 0..4 in order; all symbols must be distinct and
    /// free of whitespace.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() <= NUM_SPECIAL {
            return input_err("vocabulary has no content symbols");
        }
        for (i, special) in SPECIAL_SYMBOLS.iter().enumerate() {
            if symbols[i] != *special {
                return input_err(format!(
                    "id {i} must be {special}, found {:?}",
                    symbols[i]
                ));
            }
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return input_err(format!("symbol {s:?} is empty or contains whitespace"));
            }
            if index.insert(s.clone(), i as TokenId).is_some() {
                return input_err(format!("duplicate symbol {s:?}"));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn n_content(&self) -> usize {
        self.symbols.len() - NUM_SPECIAL
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Parses a space-separated line of content symbols.
    pub fn encode(&self, line: &str) -> Result<Vec<TokenId>> {
        line.split_whitespace()
            .map(|tok| match self.id(tok) {
                Some(id) if is_content(id) => Ok(id),
                Some(_) => input_err(format!("special token {tok} in text")),
                None => input_err(format!("unknown symbol {tok:?}")),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.len(),
            })
        }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Vocab::from_symbols(symbols)
    }
}
