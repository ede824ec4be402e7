use rayon::prelude::*;

use super::math::{gelu, layer_norm, linear, softmax_in_place, gemm, rm};
use super::ModelState;
use crate::error::{input_err, Error, Result};
use crate::oracle::PredictionOracle;
use crate::vocab::{TokenId, PAD};

/// Activations of one layer kept for the backward pass.
pub(crate) struct LayerCache {
    pub ln1_xhat: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub h1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights, `n_heads × t × t`.
    pub att: Vec<f64>,
    pub ctx: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub h2: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

pub(crate) struct SeqCache {
    pub ids: Vec<TokenId>,
    pub layers: Vec<LayerCache>,
    pub lnf_xhat: Vec<f64>,
    pub lnf_rstd: Vec<f64>,
    /// Final normalized hidden states `h(x̃)`, `t × d`.
    pub hidden: Vec<f64>,
}

impl SeqCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

fn check_ids(state: &ModelState, ids: &[TokenId]) -> Result<()> {
    let cfg = state.config();
    if ids.is_empty() {
        return input_err("empty sequence");
    }
    if ids.len() > cfg.max_len {
        return Err(Error::TooLong {
            len: ids.len(),
            max_len: cfg.max_len,
            hint: "",
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Runs the encoder over one sequence. `key_valid[j] == false` hides position
/// `j` from every query.
pub(crate) fn encode(
    state: &ModelState,
    ids: &[TokenId],
    key_valid: Option<&[bool]>,
) -> Result<SeqCache> {
    check_ids(state, ids)?;
    if let Some(kv) = key_valid {
        if kv.len() != ids.len() || !kv.iter().any(|&b| b) {
            return input_err("key mask must match the sequence and keep one position");
        }
    }
    let cfg = state.config();
    let lay = state.layout();
    let (t, d, f, nh) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = state.slice(lay.tok_emb, cfg.vocab_size * d);
    let pos = state.slice(lay.pos_emb, cfg.max_len * d);
    let mut x = vec![0.0; t * d];
    for (i, &id) in ids.iter().enumerate() {
        let te = &tok[id as usize * d..(id as usize + 1) * d];
        let pe = &pos[i * d..(i + 1) * d];
        for (o, (a, b)) in x[i * d..(i + 1) * d].iter_mut().zip(te.iter().zip(pe)) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut tmp = vec![0.0; t * d];
    for lo in &lay.layers {
        let mut c = LayerCache {
            ln1_xhat: vec![0.0; t * d],
            ln1_rstd: vec![0.0; t],
            h1: vec![0.0; t * d],
            q: vec![0.0; t * d],
            k: vec![0.0; t * d],
            v: vec![0.0; t * d],
            att: vec![0.0; nh * t * t],
            ctx: vec![0.0; t * d],
            ln2_xhat: vec![0.0; t * d],
            ln2_rstd: vec![0.0; t],
            h2: vec![0.0; t * d],
            u: vec![0.0; t * f],
            g: vec![0.0; t * f],
        };
        layer_norm(
            &x,
            d,
            state.slice(lo.ln1_g, d),
            state.slice(lo.ln1_b, d),
            &mut c.h1,
            &mut c.ln1_xhat,
            &mut c.ln1_rstd,
        );
        linear(&c.h1, state.slice(lo.wq, d * d), state.slice(lo.bq, d), t, d, d, &mut c.q);
        linear(&c.h1, state.slice(lo.wk, d * d), state.slice(lo.bk, d), t, d, d, &mut c.k);
        linear(&c.h1, state.slice(lo.wv, d * d), state.slice(lo.bv, d), t, d, d, &mut c.v);

        for h in 0..nh {
            let att = &mut c.att[h * t * t..(h + 1) * t * t];
            gemm(
                t,
                dh,
                t,
                scale,
                &c.q[h * dh..],
                (d, 1),
                &c.k[h * dh..],
                (1, d),
                0.0,
                att,
                rm(t),
            );
            for row in att.chunks_exact_mut(t) {
                if let Some(kv) = key_valid {
                    for (s, &ok) in row.iter_mut().zip(kv) {
                        if !ok {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
                softmax_in_place(row);
            }
            gemm(
                t,
                t,
                dh,
                1.0,
                att,
                rm(t),
                &c.v[h * dh..],
                (d, 1),
                0.0,
                &mut c.ctx[h * dh..],
                (d, 1),
            );
        }
        linear(&c.ctx, state.slice(lo.wo, d * d), state.slice(lo.bo, d), t, d, d, &mut tmp);
        x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);

        layer_norm(
            &x,
            d,
            state.slice(lo.ln2_g, d),
            state.slice(lo.ln2_b, d),
            &mut c.h2,
            &mut c.ln2_xhat,
            &mut c.ln2_rstd,
        );
        linear(&c.h2, state.slice(lo.w1, d * f), state.slice(lo.b1, f), t, d, f, &mut c.u);
        for (g, &u) in c.g.iter_mut().zip(&c.u) {
            *g = gelu(u);
        }
        linear(&c.g, state.slice(lo.w2, f * d), state.slice(lo.b2, d), t, f, d, &mut tmp);
        x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        layers.push(c);
    }

    let mut hidden = vec![0.0; t * d];
    let mut lnf_xhat = vec![0.0; t * d];
    let mut lnf_rstd = vec![0.0; t];
    layer_norm(
        &x,
        d,
        state.slice(lay.lnf_g, d),
        state.slice(lay.lnf_b, d),
        &mut hidden,
        &mut lnf_xhat,
        &mut lnf_rstd,
    );
    Ok(SeqCache {
        ids: ids.to_vec(),
        layers,
        lnf_xhat,
        lnf_rstd,
        hidden,
    })
}

/// Head logits for the given rows of an encoded sequence, `rows.len() × vocab`.
pub(crate) fn head_logits(state: &ModelState, cache: &SeqCache, rows: &[usize]) -> Vec<f64> {
    let cfg = state.config();
    let lay = state.layout();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut gathered = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        gathered.extend_from_slice(&cache.hidden[r * d..(r + 1) * d]);
    }
    let mut logits = vec![0.0; rows.len() * v];
    linear(
        &gathered,
        state.slice(lay.head_w, d * v),
        state.slice(lay.head_b, v),
        rows.len(),
        d,
        v,
        &mut logits,
    );
    logits
}

/// Softmax distributions at selected positions of one unpadded sequence.
pub(crate) fn probs_at_rows(
    state: &ModelState,
    ids: &[TokenId],
    rows: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if let Some(&r) = rows.iter().find(|&&r| r >= ids.len()) {
        return input_err(format!("row {r} outside sequence of length {}", ids.len()));
    }
    let cache = encode(state, ids, None)?;
    let logits = head_logits(state, &cache, rows);
    Ok(logits
        .chunks_exact(state.config().vocab_size)
        .map(|row| {
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            p
        })
        .collect())
}

/// Per-position output distributions for a single sentence.
pub fn mlm_probabilities(state: &ModelState, s: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<usize> = (0..s.len()).collect();
    probs_at_rows(state, s, &rows)
}

impl PredictionOracle for ModelState {
    fn masked_distribution(&self, seq: &[TokenId], position: usize) -> Result<Vec<f64>> {
        Ok(probs_at_rows(self, seq, &[position])?.remove(0))
    }
}

/// A rectangular batch; `pad_mask[b][t] == true` marks padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub width: usize,
    pub ids: Vec<Vec<TokenId>>,
    pub pad_mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    /// Right-pads sequences with `[PAD]` to the longest length.
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let ids = seqs
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(width, PAD);
                row
            })
            .collect();
        let pad_mask = seqs
            .iter()
            .map(|s| (0..width).map(|i| i >= s.len()).collect())
            .collect();
        Self {
            width,
            ids,
            pad_mask,
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

/// Full forward output, each field flattened `batch × len × …`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardOutput {
    pub fn probs_at(&self, b: usize, t: usize) -> &[f64] {
        let o = (b * self.len + t) * self.vocab_size;
        &self.probs[o..o + self.vocab_size]
    }

    pub fn logits_at(&self, b: usize, t: usize) -> &[f64] {
        let o = (b * self.len + t) * self.vocab_size;
        &self.logits[o..o + self.vocab_size]
    }

    pub fn hidden_at(&self, b: usize, t: usize) -> &[f64] {
        let o = (b * self.len + t) * self.d_model;
        &self.hidden[o..o + self.d_model]
    }
}

/// Batched forward pass. Padded positions are excluded as attention keys;
/// their own outputs are still computed and should be ignored.
pub fn forward(state: &ModelState, batch: &PaddedBatch) -> Result<ForwardOutput> {
    let cfg = state.config();
    let (w, v, d) = (batch.width, cfg.vocab_size, cfg.d_model);
    if batch.pad_mask.len() != batch.rows()
        || batch
            .ids
            .iter()
            .zip(&batch.pad_mask)
            .any(|(r, m)| r.len() != w || m.len() != w)
    {
        return input_err("batch rows and pad mask must all have the batch width");
    }
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = batch
        .ids
        .par_iter()
        .zip(&batch.pad_mask)
        .map(|(ids, pad)| {
            let valid: Vec<bool> = pad.iter().map(|&p| !p).collect();
            let cache = encode(state, ids, Some(&valid))?;
            let all: Vec<usize> = (0..w).collect();
            let logits = head_logits(state, &cache, &all);
            let mut probs = logits.clone();
            probs.chunks_exact_mut(v).for_each(|r| {
                softmax_in_place(r);
            });
            Ok((cache.hidden, logits, probs))
        })
        .collect::<Result<_>>()?;
    let mut out = ForwardOutput {
        batch: batch.rows(),
        len: w,
        d_model: d,
        vocab_size: v,
        hidden: Vec::with_capacity(batch.rows() * w * d),
        logits: Vec::with_capacity(batch.rows() * w * v),
        probs: Vec::with_capacity(batch.rows() * w * v),
    };
    for (h, l, p) in rows {
        out.hidden.extend(h);
        out.logits.extend(l);
        out.probs.extend(p);
    }
    Ok(out)
}
