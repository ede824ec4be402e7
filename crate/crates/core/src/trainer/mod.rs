//! Adam training with linear warmup, and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::{corrupt, CorruptionConfig, CorruptionRecord};
use crate::error::{config_err, input_err, Error, Result};
use crate::model::{init_params, loss_and_grads, LossBreakdown, ModelConfig, ModelState, Objective};
use crate::oracle::PredictionOracle;
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub objective: Objective,
    pub corruption: CorruptionConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 4000,
            warmup_steps: 400,
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            seed: 0,
            objective: Objective::NullMlm,
            corruption: CorruptionConfig::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Plain masked-LM training with baseline corruption.
    pub fn baseline() -> Self {
        Self {
            objective: Objective::PlainMlm,
            corruption: CorruptionConfig::baseline(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return config_err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return config_err("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return config_err("adam_eps must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return config_err("clip_norm must be positive");
        }
        if self.objective == Objective::PlainMlm && !self.corruption.baseline_mode {
            return config_err("eq1 training needs baseline-mode corruption");
        }
        self.corruption.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Learning rate used for the update that completes `step` steps.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.base_lr
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    step: usize,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return input_err(format!(
            "shape mismatch: params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    if step == 0 {
        return input_err("Adam step counts from 1");
    }
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// SplitMix64 finalizer over a combined key; used to give every step and
/// every record its own stream.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch loss before each update.
    pub history: Vec<LossBreakdown>,
}

/// Draws and corrupts the batch for `step`.
pub fn sample_batch(
    corpus: &[Vec<TokenId>],
    vocab_size: usize,
    cfg: &TrainConfig,
    aux: Option<&dyn PredictionOracle>,
    step: usize,
) -> Result<Vec<CorruptionRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64, u64::MAX));
    let picks: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..corpus.len()))
        .collect();
    picks
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let seed = derive_seed(cfg.seed, step as u64, i as u64);
            corrupt(&corpus[p], &cfg.corruption, vocab_size, aux, seed)
        })
        .collect()
}

/// Trains a freshly initialized model.
pub fn train(
    corpus: &[Vec<TokenId>],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aux: Option<&dyn PredictionOracle>,
) -> Result<TrainOutcome> {
    train_with(corpus, vocab, model_cfg, cfg, aux, |_, _, _| {})
}

/// [`train`] with a callback invoked after every step with the step count, the
/// batch loss and the updated model.
pub fn train_with(
    corpus: &[Vec<TokenId>],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aux: Option<&dyn PredictionOracle>,
    mut on_step: impl FnMut(usize, &LossBreakdown, &ModelState),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if corpus.is_empty() {
        return input_err("training corpus is empty");
    }
    if model_cfg.vocab_size != vocab.len() {
        return config_err(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_cfg.vocab_size,
            vocab.len()
        ));
    }
    if cfg.corruption.needs_aux() && aux.is_none() && cfg.total_steps > 0 {
        return config_err("mask-and-generate is enabled but no auxiliary model was given");
    }
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
    let grown = if cfg.corruption.baseline_mode {
        longest
    } else {
        longest + longest.div_ceil(2)
    };
    if grown > model_cfg.max_len {
        return Err(Error::TooLong {
            len: grown,
            max_len: model_cfg.max_len,
            hint: " (corrupted training sequences can grow by up to half their length)",
        });
    }

    let mut model = init_params(model_cfg)?;
    let mut adam = AdamState::new(model.n_params());
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch = sample_batch(corpus, vocab.len(), cfg, aux, step)?;
        let (loss, mut grads) = loss_and_grads(&model, &batch, cfg.objective)?;
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = lr_schedule(step + 1, cfg);
        adam_step(
            &mut model.params,
            &grads,
            &mut adam,
            step + 1,
            lr,
            (cfg.beta1, cfg.beta2),
            cfg.adam_eps,
        )?;
        model.round_to_f32();
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
            log::info!(
                "step {step}: loss {:.4} (sub {:.4}, ins {:.4}), lr {lr:.2e}",
                loss.total,
                loss.substitution,
                loss.insertion
            );
        }
        on_step(step + 1, &loss, &model);
        history.push(loss);
    }
    if !model.all_finite() {
        return Err(Error::Input("training diverged to non-finite parameters".into()));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            vocab: vocab.clone(),
            step: cfg.total_steps as u64,
            train_digest: cfg.digest(),
        },
        history,
    })
}
