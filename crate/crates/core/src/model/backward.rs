use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{encode, head_logits, SeqCache};
use super::math::{gelu_grad, gemm, layer_norm_backward, linear_backward, rm, softmax_in_place, tr};
use super::ModelState;
use crate::corruption::CorruptionRecord;
use crate::error::{input_err, Error, Result};
use crate::vocab::{TokenId, NULL};

/// Records per parallel work unit. Fixed so that the reduction order does not
/// depend on the thread count.
const CHUNK: usize = 4;

/// Training objective: plain masked-LM cross-entropy on substituted slots, or
/// that plus `[NULL]` cross-entropy on inserted slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "eq1")]
    PlainMlm,
    #[serde(rename = "eq2")]
    NullMlm,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::PlainMlm => "eq1",
            Objective::NullMlm => "eq2",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq1" => Ok(Objective::PlainMlm),
            "eq2" => Ok(Objective::NullMlm),
            _ => Err(Error::Config(format!("unknown objective {s:?} (expected eq1 or eq2)"))),
        }
    }
}

/// Batch loss, averaged over sequences. `total == substitution + insertion`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub substitution: f64,
    pub insertion: f64,
}

struct Target {
    row: usize,
    id: TokenId,
    inserted: bool,
}

fn targets_of(rec: &CorruptionRecord, objective: Objective, vocab_size: usize) -> Result<Vec<Target>> {
    let n = rec.corrupted.len();
    if objective == Objective::PlainMlm
        && (!rec.ins_indices.is_empty() || rec.targets.values().any(|&t| t == NULL))
    {
        return input_err("plain MLM objective cannot train on NULL targets");
    }
    let mut out = Vec::with_capacity(rec.targets.len());
    for (&row, &id) in &rec.targets {
        if row >= n {
            return input_err(format!("target index {row} outside sequence of length {n}"));
        }
        if id as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        let inserted = rec.ins_indices.binary_search(&row).is_ok();
        if inserted != (id == NULL) {
            return input_err(format!("target at {row} disagrees with its slot kind"));
        }
        out.push(Target { row, id, inserted });
    }
    Ok(out)
}

/// Mean-over-sequences loss and its exact gradient in parameter layout order.
pub fn loss_and_grads(
    state: &ModelState,
    records: &[CorruptionRecord],
    objective: Objective,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if records.is_empty() {
        return input_err("empty batch");
    }
    let v = state.config().vocab_size;
    let targets = records
        .iter()
        .map(|r| targets_of(r, objective, v))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / records.len() as f64;
    let n = state.n_params();

    let parts: Vec<(LossBreakdown, Vec<f64>)> = records
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(recs, tgts)| {
            let mut grads = vec![0.0; n];
            let mut loss = LossBreakdown::default();
            for (rec, tg) in recs.iter().zip(tgts) {
                if tg.is_empty() {
                    continue;
                }
                let cache = encode(state, &rec.corrupted, None)?;
                let (sub, ins) = sequence_backward(state, &cache, tg, scale, &mut grads);
                loss.substitution += sub;
                loss.insertion += ins;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;

    let mut loss = LossBreakdown::default();
    let mut grads = vec![0.0; n];
    for (l, g) in parts {
        loss.substitution += l.substitution;
        loss.insertion += l.insertion;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    loss.substitution *= scale;
    loss.insertion *= scale;
    loss.total = loss.substitution + loss.insertion;
    Ok((loss, grads))
}

/// Mutable views of two adjacent tensors (weight, then its bias).
fn pair_mut(g: &mut [f64], w: usize, w_len: usize, b: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(w + w_len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[w..w + w_len], &mut hi[..b_len])
}

/// Backpropagates one sequence's summed target NLL, scaled by `scale`, into
/// `grads`. Returns the unscaled (substitution, insertion) loss sums.
fn sequence_backward(
    state: &ModelState,
    cache: &SeqCache,
    targets: &[Target],
    scale: f64,
    grads: &mut [f64],
) -> (f64, f64) {
    let cfg = state.config();
    let lay = state.layout();
    let (t, d, f, v, nh) = (cache.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();

    let rows: Vec<usize> = targets.iter().map(|tg| tg.row).collect();
    let mut dlogits = head_logits(state, cache, &rows);
    let (mut sub, mut ins) = (0.0, 0.0);
    for (row, tg) in dlogits.chunks_exact_mut(v).zip(targets) {
        softmax_in_place(row);
        let nll = -row[tg.id as usize].ln();
        if tg.inserted {
            ins += nll;
        } else {
            sub += nll;
        }
        row[tg.id as usize] -= 1.0;
        row.iter_mut().for_each(|x| *x *= scale);
    }

    // Output head on the gathered target rows.
    let r = rows.len();
    let mut gathered = Vec::with_capacity(r * d);
    for &row in &rows {
        gathered.extend_from_slice(&cache.hidden[row * d..(row + 1) * d]);
    }
    let mut dgathered = vec![0.0; r * d];
    {
        let (dw, db) = pair_mut(grads, lay.head_w, d * v, lay.head_b, v);
        linear_backward(
            &gathered,
            state.slice(lay.head_w, d * v),
            &dlogits,
            r,
            d,
            v,
            dw,
            db,
            Some((&mut dgathered, 0.0)),
        );
    }
    let mut dhidden = vec![0.0; t * d];
    for (i, &row) in rows.iter().enumerate() {
        for j in 0..d {
            dhidden[row * d + j] += dgathered[i * d + j];
        }
    }

    // Final layer norm.
    let mut dx = vec![0.0; t * d];
    {
        let (dg, db) = pair_mut(grads, lay.lnf_g, d, lay.lnf_b, d);
        layer_norm_backward(
            &dhidden,
            &cache.lnf_xhat,
            &cache.lnf_rstd,
            state.slice(lay.lnf_g, d),
            d,
            &mut dx,
            dg,
            db,
        );
    }

    let mut dg_buf = vec![0.0; t * f];
    let mut dnorm = vec![0.0; t * d];
    let mut dctx = vec![0.0; t * d];
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut da = vec![0.0; t * t];
    for (lo, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // Feed-forward sublayer: x_out = x_mid + W2·gelu(W1·LN2(x_mid)).
        {
            let (dw, db) = pair_mut(grads, lo.w2, f * d, lo.b2, d);
            linear_backward(&c.g, state.slice(lo.w2, f * d), &dx, t, f, d, dw, db, Some((&mut dg_buf, 0.0)));
        }
        for (g, &u) in dg_buf.iter_mut().zip(&c.u) {
            *g *= gelu_grad(u);
        }
        {
            let (dw, db) = pair_mut(grads, lo.w1, d * f, lo.b1, f);
            linear_backward(&c.h2, state.slice(lo.w1, d * f), &dg_buf, t, d, f, dw, db, Some((&mut dnorm, 0.0)));
        }
        {
            let (dg, db) = pair_mut(grads, lo.ln2_g, d, lo.ln2_b, d);
            layer_norm_backward(&dnorm, &c.ln2_xhat, &c.ln2_rstd, state.slice(lo.ln2_g, d), d, &mut dx, dg, db);
        }

        // Attention sublayer: x_mid = x_in + Wo·attn(LN1(x_in)).
        {
            let (dw, db) = pair_mut(grads, lo.wo, d * d, lo.bo, d);
            linear_backward(&c.ctx, state.slice(lo.wo, d * d), &dx, t, d, d, dw, db, Some((&mut dctx, 0.0)));
        }
        for h in 0..nh {
            let a = &c.att[h * t * t..(h + 1) * t * t];
            // dA = dctx_h · v_hᵀ
            gemm(t, dh, t, 1.0, &dctx[h * dh..], (d, 1), &c.v[h * dh..], (1, d), 0.0, &mut da, rm(t));
            // dv_h = Aᵀ · dctx_h
            gemm(t, t, dh, 1.0, a, tr(t), &dctx[h * dh..], (d, 1), 0.0, &mut dv[h * dh..], (d, 1));
            for (arow, drow) in a.chunks_exact(t).zip(da.chunks_exact_mut(t)) {
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(x, y)| x * y).sum();
                for (dv_, &av) in drow.iter_mut().zip(arow) {
                    *dv_ = av * (*dv_ - dot);
                }
            }
            // dq_h = dS · k_h, dk_h = dSᵀ · q_h, both times the score scale.
            gemm(t, t, dh, att_scale, &da, rm(t), &c.k[h * dh..], (d, 1), 0.0, &mut dq[h * dh..], (d, 1));
            gemm(t, t, dh, att_scale, &da, tr(t), &c.q[h * dh..], (d, 1), 0.0, &mut dk[h * dh..], (d, 1));
        }
        for (w, b, dy, beta) in [(lo.wq, lo.bq, &dq, 0.0), (lo.wk, lo.bk, &dk, 1.0), (lo.wv, lo.bv, &dv, 1.0)] {
            let (dw, db) = pair_mut(grads, w, d * d, b, d);
            linear_backward(&c.h1, state.slice(w, d * d), dy, t, d, d, dw, db, Some((&mut dnorm, beta)));
        }
        {
            let (dg, db) = pair_mut(grads, lo.ln1_g, d, lo.ln1_b, d);
            layer_norm_backward(&dnorm, &c.ln1_xhat, &c.ln1_rstd, state.slice(lo.ln1_g, d), d, &mut dx, dg, db);
        }
    }

    // Token and position embeddings.
    for (i, &id) in cache.ids.iter().enumerate() {
        let g = &dx[i * d..(i + 1) * d];
        let te = lay.tok_emb + id as usize * d;
        grads[te..te + d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        let pe = lay.pos_emb + i * d;
        grads[pe..pe + d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    (sub, ins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use std::collections::BTreeMap;

    fn record(corrupted: Vec<TokenId>, subs: &[(usize, TokenId)], ins: &[usize]) -> CorruptionRecord {
        let mut targets = BTreeMap::new();
        for &(i, t) in subs {
            targets.insert(i, t);
        }
        for &i in ins {
            targets.insert(i, NULL);
        }
        let original = corrupted
            .iter()
            .enumerate()
            .filter(|(i, _)| !ins.contains(i))
            .map(|(i, &t)| targets.get(&i).copied().unwrap_or(t))
            .collect();
        CorruptionRecord {
            original,
            corrupted,
            sub_indices: subs.iter().map(|s| s.0).collect(),
            ins_indices: ins.to_vec(),
            targets,
            fills: BTreeMap::new(),
        }
    }

    #[test]
    fn uniform_loss_is_log_vocab() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 10,
            max_len: 8,
            seed: 0,
        };
        let m = ModelState::zeros(&cfg).unwrap();
        let rec = record(vec![4, 2, 5], &[(1, 7)], &[]);
        let (loss, _) = loss_and_grads(&m, &[rec], Objective::PlainMlm).unwrap();
        assert!((loss.total - 10f64.ln()).abs() < 1e-12);
        assert_eq!(loss.insertion, 0.0);
    }

    #[test]
    fn plain_objective_rejects_null_targets() {
        let m = init_params(&ModelConfig {
            vocab_size: 12,
            max_len: 8,
            d_model: 8,
            d_ff: 8,
            n_heads: 2,
            n_layers: 1,
            seed: 0,
        })
        .unwrap();
        let rec = record(vec![4, 9, 5], &[], &[1]);
        assert!(loss_and_grads(&m, &[rec.clone()], Objective::PlainMlm).is_err());
        assert!(loss_and_grads(&m, &[rec], Objective::NullMlm).is_ok());
    }

    #[test]
    fn objective_parses() {
        assert_eq!("eq2".parse::<Objective>().unwrap(), Objective::NullMlm);
        assert_eq!(Objective::PlainMlm.to_string(), "eq1");
        assert!("eq3".parse::<Objective>().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 24,
            vocab_size: 14,
            max_len: 8,
            seed: 5,
        };
        let mut m = init_params(&cfg).unwrap();
        let recs = vec![
            record(vec![4, 2, 9, 6, 7], &[(1, 5), (3, 11)], &[2]),
            record(vec![8, 13, 2], &[(2, 4)], &[0]),
        ];
        for obj in [Objective::NullMlm, Objective::PlainMlm] {
            let recs: Vec<_> = if obj == Objective::PlainMlm {
                vec![record(vec![4, 2, 9, 6, 7], &[(1, 5), (3, 11)], &[]), record(vec![8, 13, 2], &[(2, 4)], &[])]
            } else {
                recs.clone()
            };
            let (_, g) = loss_and_grads(&m, &recs, obj).unwrap();
            let eps = 1e-4;
            let mut worst: f64 = 0.0;
            for i in 0..m.params.len() {
                let orig = m.params[i];
                m.params[i] = orig + eps;
                let lp = loss_and_grads(&m, &recs, obj).unwrap().0.total;
                m.params[i] = orig - eps;
                let lm = loss_and_grads(&m, &recs, obj).unwrap().0.total;
                m.params[i] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{obj}: {worst}");
        }
    }
}
