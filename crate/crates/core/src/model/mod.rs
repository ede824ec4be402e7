//! A small pre-norm transformer encoder with a masked-LM head whose classes
//! include `[NULL]`, with hand-written backpropagation.

mod backward;
mod forward;
pub(crate) mod math;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::vocab::NUM_SPECIAL;

pub use backward::{loss_and_grads, LossBreakdown, Objective};
pub use forward::{forward, mlm_probabilities, ForwardOutput, PaddedBatch};
pub(crate) use forward::probs_at_rows;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Includes the special tokens.
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 204,
            max_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return config_err("layer, head and width counts must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return config_err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= NUM_SPECIAL {
            return config_err("vocab_size must exceed the special-token count");
        }
        if self.max_len == 0 {
            return config_err("max_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Weight matrices and embeddings are randomly initialized; biases and
    /// layer-norm shifts start at zero and gains at one.
    pub init: TensorInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorInit {
    Normal,
    Zero,
    One,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Where every tensor lives in the flat parameter vector.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, init: TensorInit| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
                init,
            });
            offset
        };
        use TensorInit::*;
        let tok_emb = add("tok_emb".into(), vec![v, d], Normal);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_len, d], Normal);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1.gain"), vec![d], One),
                ln1_b: add(p("ln1.bias"), vec![d], Zero),
                wq: add(p("attn.wq"), vec![d, d], Normal),
                bq: add(p("attn.bq"), vec![d], Zero),
                wk: add(p("attn.wk"), vec![d, d], Normal),
                bk: add(p("attn.bk"), vec![d], Zero),
                wv: add(p("attn.wv"), vec![d, d], Normal),
                bv: add(p("attn.bv"), vec![d], Zero),
                wo: add(p("attn.wo"), vec![d, d], Normal),
                bo: add(p("attn.bo"), vec![d], Zero),
                ln2_g: add(p("ln2.gain"), vec![d], One),
                ln2_b: add(p("ln2.bias"), vec![d], Zero),
                w1: add(p("ff.w1"), vec![d, f], Normal),
                b1: add(p("ff.b1"), vec![f], Zero),
                w2: add(p("ff.w2"), vec![f, d], Normal),
                b2: add(p("ff.b2"), vec![d], Zero),
            });
        }
        let lnf_g = add("final_ln.gain".into(), vec![d], One);
        let lnf_b = add("final_ln.bias".into(), vec![d], Zero);
        let head_w = add("head.weight".into(), vec![d, v], Normal);
        let head_b = add("head.bias".into(), vec![v], Zero);
        Self {
            tensors,
            total,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Tensors in storage order.
    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    /// Tensors sorted by name.
    pub fn sorted(&self) -> Vec<&TensorSpec> {
        let mut v: Vec<&TensorSpec> = self.tensors.iter().collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Model configuration plus every trainable parameter in one flat vector.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    layout: ParamLayout,
    pub params: Vec<f64>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Random initialization: weights and embeddings from `N(0, 0.02²)`, biases
/// zero, layer-norm gains one. Values are rounded to `f32` so checkpoints
/// reproduce them exactly.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelState> {
    let mut state = ModelState::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for spec in state.layout.tensors.clone() {
        let slice = &mut state.params[spec.offset..spec.offset + spec.len()];
        match spec.init {
            TensorInit::Normal => slice.iter_mut().for_each(|p| *p = normal.sample(&mut rng)),
            TensorInit::Zero => {}
            TensorInit::One => slice.fill(1.0),
        }
    }
    state.round_to_f32();
    Ok(state)
}

impl ModelState {
    /// Every parameter zero, gains included.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        Ok(Self {
            params: vec![0.0; layout.total()],
            config: cfg.clone(),
            layout,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut s = Self::zeros(cfg)?;
        if params.len() != s.params.len() {
            return config_err(format!(
                "expected {} parameters, got {}",
                s.params.len(),
                params.len()
            ));
        }
        s.params = params;
        Ok(s)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .get(name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    #[inline]
    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        let c = init_params(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn embedding_shape() {
        let cfg = ModelConfig::default();
        let s = init_params(&cfg).unwrap();
        let spec = s.layout().get("tok_emb").unwrap();
        assert_eq!(spec.shape, vec![cfg.vocab_size, cfg.d_model]);
        assert_eq!(s.tensor("tok_emb").unwrap().len(), 204 * 64);
    }

    #[test]
    fn init_statistics() {
        let s = init_params(&ModelConfig::default()).unwrap();
        let mut vals = Vec::new();
        for spec in s.layout().tensors() {
            let t = s.tensor(&spec.name).unwrap();
            match spec.init {
                TensorInit::Normal => vals.extend_from_slice(t),
                TensorInit::Zero => assert!(t.iter().all(|&x| x == 0.0)),
                TensorInit::One => assert!(t.iter().all(|&x| x == 1.0)),
            }
        }
        assert!(vals.len() >= 100_000);
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.1 * INIT_STD, "mean {mean}");
        assert!((std - INIT_STD).abs() < 0.1 * INIT_STD, "std {std}");
        assert!(s.all_finite());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(init_params(&bad).is_err());
        assert!(init_params(&ModelConfig { vocab_size: 4, ..Default::default() }).is_err());
        assert!(init_params(&ModelConfig { n_layers: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn layout_names_unique() {
        let l = ParamLayout::new(&ModelConfig { n_layers: 3, ..Default::default() });
        let sorted = l.sorted();
        assert!(sorted.windows(2).all(|w| w[0].name < w[1].name));
        assert_eq!(l.tensors().iter().map(TensorSpec::len).sum::<usize>(), l.total());
    }
}
