//! Minimal edit alignment between an erroneous sentence and its correction.
//!
//! Unit-cost Levenshtein alignment traced left to right. Among optimal scripts
//! a match is taken whenever tokens agree, then substitute, delete, insert in
//! that order. Afterwards edits inside runs of identical tokens are moved to a
//! canonical place: a deletion to the last member of the run, an insertion to
//! the leftmost gap of the run.

use crate::dataset::GoldEdit;
use crate::error::{input_err, Result};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Edit {
    /// Insert `token` before source token `gap` (or at the end when `gap == n`).
    Insert { gap: usize, token: TokenId },
    /// Remove source token at `position`.
    Delete { position: usize, token: TokenId },
    /// Replace source token at `position` with `to`.
    Substitute {
        position: usize,
        from: TokenId,
        to: TokenId,
    },
}

impl Edit {
    pub fn index(&self) -> usize {
        match *self {
            Edit::Insert { gap, .. } => gap,
            Edit::Delete { position, .. } | Edit::Substitute { position, .. } => position,
        }
    }

    fn is_insert(&self) -> bool {
        matches!(self, Edit::Insert { .. })
    }

    /// Inserts at gap g sort before an edit of token g.
    fn sort_key(&self) -> (usize, u8) {
        (self.index(), if self.is_insert() { 0 } else { 1 })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EditSet {
    edits: Vec<Edit>,
}

impl EditSet {
    /// Validates ordering and that no two edits touch the same source token.
    /// Several inserts may share a gap; they are applied in the given order.
    pub fn new(edits: Vec<Edit>) -> Result<Self> {
        for w in edits.windows(2) {
            if w[1].sort_key() < w[0].sort_key() {
                return input_err(format!("edits out of order: {:?} after {:?}", w[1], w[0]));
            }
            if !w[0].is_insert() && !w[1].is_insert() && w[0].index() == w[1].index() {
                return input_err(format!("overlapping edits at position {}", w[0].index()));
            }
        }
        Ok(Self { edits })
    }

    pub fn edits(&self) -> &[Edit] {
        &self.edits
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }
}

/// Suffix edit distances: `d[i][j]` = distance from `source[i..]` to `target[j..]`.
fn suffix_distances(source: &[TokenId], target: &[TokenId]) -> Vec<Vec<usize>> {
    let (n, m) = (source.len(), target.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            d[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else if source[i] == target[j] {
                d[i + 1][j + 1]
            } else {
                1 + d[i + 1][j + 1].min(d[i + 1][j]).min(d[i][j + 1])
            };
        }
    }
    d
}

pub fn edit_distance(source: &[TokenId], target: &[TokenId]) -> usize {
    suffix_distances(source, target)[0][0]
}

pub fn align(source: &[TokenId], target: &[TokenId]) -> EditSet {
    let d = suffix_distances(source, target);
    let (n, m) = (source.len(), target.len());
    let (mut i, mut j) = (0, 0);
    let mut edits = Vec::with_capacity(d[0][0]);
    while i < n || j < m {
        let here = d[i][j];
        if i < n && j < m && source[i] == target[j] && here == d[i + 1][j + 1] {
            i += 1;
            j += 1;
        } else if i < n && j < m && here == 1 + d[i + 1][j + 1] {
            edits.push(Edit::Substitute {
                position: i,
                from: source[i],
                to: target[j],
            });
            i += 1;
            j += 1;
        } else if i < n && here == 1 + d[i + 1][j] {
            edits.push(Edit::Delete {
                position: i,
                token: source[i],
            });
            i += 1;
        } else {
            edits.push(Edit::Insert {
                gap: i,
                token: target[j],
            });
            j += 1;
        }
    }
    normalize_runs(source, &mut edits);
    EditSet { edits }
}

/// Moves deletions to the last token of a run of identical tokens and
/// insertions of a run's token to the run's leftmost gap (only the first of
/// several inserts sharing a gap can move). Idempotent, and the
/// applied result is unchanged.
pub fn normalize_runs(source: &[TokenId], edits: &mut Vec<Edit>) {
    loop {
        let mut changed = false;
        for k in 0..edits.len() {
            let touched = |pos: usize, edits: &[Edit]| {
                edits
                    .iter()
                    .any(|e| !e.is_insert() && e.index() == pos)
            };
            let inserts_at = |gap: usize, edits: &[Edit]| {
                edits.iter().filter(|e| e.is_insert() && e.index() == gap).count()
            };
            match edits[k] {
                Edit::Delete { position, token } => {
                    let next = position + 1;
                    if next < source.len()
                        && source[next] == token
                        && !touched(next, edits)
                        && inserts_at(next, edits) == 0
                    {
                        edits[k] = Edit::Delete {
                            position: next,
                            token,
                        };
                        changed = true;
                    }
                }
                Edit::Insert { gap, token } => {
                    if gap > 0
                        && source[gap - 1] == token
                        && !touched(gap - 1, edits)
                        && !edits[..k].iter().any(|e| e.is_insert() && e.index() == gap)
                        && inserts_at(gap - 1, edits) == 0
                    {
                        edits[k] = Edit::Insert {
                            gap: gap - 1,
                            token,
                        };
                        changed = true;
                    }
                }
                Edit::Substitute { .. } => {}
            }
        }
        if !changed {
            break;
        }
    }
    // Stable: inserts sharing a gap keep their relative order.
    edits.sort_by_key(Edit::sort_key);
}

pub fn apply_edits(source: &[TokenId], edits: &EditSet) -> Result<Vec<TokenId>> {
    let n = source.len();
    let mut out = Vec::with_capacity(n + edits.len());
    let mut it = edits.edits().iter().peekable();
    for pos in 0..=n {
        let mut removed = false;
        while let Some(e) = it.peek() {
            if e.index() != pos {
                break;
            }
            match **e {
                Edit::Insert { token, .. } => out.push(token),
                Edit::Delete { token, .. } => {
                    if source[pos] != token {
                        return input_err(format!(
                            "delete at {pos} expects token {token}, found {}",
                            source[pos]
                        ));
                    }
                    removed = true;
                }
                Edit::Substitute { to, .. } => {
                    out.push(to);
                    removed = true;
                }
            }
            it.next();
        }
        if pos < n && !removed {
            out.push(source[pos]);
        }
    }
    if let Some(e) = it.next() {
        return input_err(format!("edit {e:?} out of range for source of length {n}"));
    }
    Ok(out)
}

/// Converts insert/delete edits to gold annotations. Substitutions are outside
/// the insertion/deletion scope and rejected.
pub fn edits_to_gold(edits: &EditSet) -> Result<Vec<GoldEdit>> {
    edits
        .edits()
        .iter()
        .map(|e| match *e {
            Edit::Insert { gap, token } => Ok(GoldEdit::Insert { gap, token }),
            Edit::Delete { position, .. } => Ok(GoldEdit::Delete { position }),
            Edit::Substitute { position, .. } => {
                input_err(format!("substitution at position {position} has no gold form"))
            }
        })
        .collect()
}
