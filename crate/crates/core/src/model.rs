//! The two-token transformer and its analytic FLOP accounting.
//!
//! Input embeddings are the concatenation of a learned token embedding, a
//! two-wide positional code, and a shared trainable hidden pad, giving
//! `d_model = d_emb + d_pos + d_hid`. Four pre-LN blocks follow (attention
//! and feed-forward sublayers, residuals outside the norms, `d_ff = d_model`,
//! dropout fixed at 0), then a final norm and a vocabulary-sized head read
//! out at the goal-token position.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Standard deviation for embedding and weight-matrix initialization.
pub const INIT_STD: f64 = 0.02;

/// Identity tag of the frozen FLOP formula; recorded next to every metric
/// stream so future changes can never silently shift x-axes.
pub const FLOPS_FORMULA_VERSION: &str = "fpe-v1";

/// Input sequence length: start token, then goal token.
pub const SEQ_LEN: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    HeadsMismatch { d_model: usize, heads: usize },
    #[error("one-hot positional codes need d_pos = 2, got {0}")]
    PositionalWidth(usize),
    #[error("vocabulary must have at least 4 tokens (2 nodes + labels), got {0}")]
    VocabularyTooSmall(usize),
    #[error("dropout is fixed at 0, got {0}")]
    DropoutUnsupported(f64),
    #[error("configuration fields must be positive")]
    ZeroField,
    #[error("token {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("parameter store does not match the configuration: {0}")]
    StoreMismatch(String),
}

/// How the two positional coordinates are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    /// Fixed one-hot of the position: position 0 -> (1, 0), position 1 -> (0, 1).
    OneHot,
    /// A trainable 2-vector per position.
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_pos: usize,
    pub d_hid: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub positional: PositionalEncoding,
    pub dropout: f64,
}

impl ModelConfig {
    /// Defaults for everything except the two axes that vary in experiments:
    /// d_pos = 2, d_hid = 32, 4 layers, 2 heads, one-hot positions, dropout 0.
    pub fn new(d_emb: usize, vocab_size: usize) -> Self {
        Self {
            d_emb,
            d_pos: 2,
            d_hid: 32,
            num_layers: 4,
            num_heads: 2,
            vocab_size,
            positional: PositionalEncoding::OneHot,
            dropout: 0.0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_emb + self.d_pos + self.d_hid
    }

    pub fn d_ff(&self) -> usize {
        self.d_model()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_emb == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(ModelError::ZeroField);
        }
        if self.vocab_size < 4 {
            return Err(ModelError::VocabularyTooSmall(self.vocab_size));
        }
        if self.positional == PositionalEncoding::OneHot && self.d_pos != SEQ_LEN {
            return Err(ModelError::PositionalWidth(self.d_pos));
        }
        if self.dropout != 0.0 {
            return Err(ModelError::DropoutUnsupported(self.dropout));
        }
        if self.d_model() % self.num_heads != 0 {
            return Err(ModelError::HeadsMismatch {
                d_model: self.d_model(),
                heads: self.num_heads,
            });
        }
        Ok(())
    }

    /// Exact trainable-parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model();
        let ff = self.d_ff();
        let per_layer = 2 * (2 * d)              // two norms, gain + shift each
            + 4 * (d * d + d)                    // q, k, v, o projections with biases
            + (d * ff + ff) + (ff * d + d);      // feed-forward in/out with biases
        let positional = match self.positional {
            PositionalEncoding::OneHot => 0,
            PositionalEncoding::Trainable => SEQ_LEN * self.d_pos,
        };
        self.vocab_size * self.d_emb            // token embeddings
            + positional
            + self.d_hid                         // shared hidden pad
            + self.num_layers * per_layer
            + 2 * d                              // final norm
            + d * self.vocab_size                // output head (no bias)
    }
}

/// Per-training-step FLOPs for one example under the frozen accounting
/// formula (version [`FLOPS_FORMULA_VERSION`]).
///
/// Per token: `8 * d_model^2` for the Q/K/V/O projections, `4 * d_model *
/// d_ff` for the feed-forward, and `4 * S * d_model` (S = 2) for attention
/// scores and mixing. Per example: `2 * d_model * vocab` for the head at the
/// single readout position. Embedding lookups count as zero. A training
/// step costs `3 x` forward (one forward plus two for backward). Exact
/// integer arithmetic; this formula is a contract, not a hardware model.
pub fn flops_per_example(config: &ModelConfig) -> u64 {
    let d = config.d_model() as u64;
    let ff = config.d_ff() as u64;
    let vocab = config.vocab_size as u64;
    let seq = SEQ_LEN as u64;
    let per_token = 8 * d * d + 4 * d * ff + 4 * seq * d;
    let forward = seq * per_token + 2 * d * vocab;
    3 * forward
}

struct LayerIds {
    norm1_gain: ParamId,
    norm1_shift: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    norm2_gain: ParamId,
    norm2_shift: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

struct ParamIds {
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    hidden_pad: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_shift: ParamId,
    head: ParamId,
}

/// All trainable tensors of one model, bound to a [`ParamStore`].
pub struct ModelParams<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    ids: ParamIds,
}

impl<S: Scalar> ModelParams<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Converts every tensor to another precision (used to run a trained
    /// model under the 64-bit verification path).
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let mut store = ParamStore::<T>::new();
        for id in self.store.ids() {
            store.insert(self.store.name(id).to_string(), self.store.value(id).cast::<T>());
        }
        ModelParams::from_store(self.config.clone(), store)
            .expect("cast preserves names and shapes")
    }

    /// Rebinds a configuration to an existing store (for example one loaded
    /// from a checkpoint), checking names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore<S>) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model();
        let expect = |name: &str, rows: usize, cols: usize| -> Result<ParamId, ModelError> {
            let id = store
                .id(name)
                .ok_or_else(|| ModelError::StoreMismatch(format!("missing tensor {name}")))?;
            let shape = store.value(id).shape();
            if shape != (rows, cols) {
                return Err(ModelError::StoreMismatch(format!(
                    "tensor {name} has shape {shape:?}, expected ({rows}, {cols})"
                )));
            }
            Ok(id)
        };
        let tok_emb = expect("tok_emb", config.vocab_size, config.d_emb)?;
        let pos_emb = match config.positional {
            PositionalEncoding::OneHot => None,
            PositionalEncoding::Trainable => Some(expect("pos_emb", SEQ_LEN, config.d_pos)?),
        };
        let hidden_pad = expect("hidden_pad", 1, config.d_hid)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            layers.push(LayerIds {
                norm1_gain: expect(&format!("layer{layer}.norm1.gain"), 1, d)?,
                norm1_shift: expect(&format!("layer{layer}.norm1.shift"), 1, d)?,
                wq: expect(&format!("layer{layer}.attn.wq"), d, d)?,
                bq: expect(&format!("layer{layer}.attn.bq"), 1, d)?,
                wk: expect(&format!("layer{layer}.attn.wk"), d, d)?,
                bk: expect(&format!("layer{layer}.attn.bk"), 1, d)?,
                wv: expect(&format!("layer{layer}.attn.wv"), d, d)?,
                bv: expect(&format!("layer{layer}.attn.bv"), 1, d)?,
                wo: expect(&format!("layer{layer}.attn.wo"), d, d)?,
                bo: expect(&format!("layer{layer}.attn.bo"), 1, d)?,
                norm2_gain: expect(&format!("layer{layer}.norm2.gain"), 1, d)?,
                norm2_shift: expect(&format!("layer{layer}.norm2.shift"), 1, d)?,
                ffn_w1: expect(&format!("layer{layer}.ffn.w1"), d, config.d_ff())?,
                ffn_b1: expect(&format!("layer{layer}.ffn.b1"), 1, config.d_ff())?,
                ffn_w2: expect(&format!("layer{layer}.ffn.w2"), config.d_ff(), d)?,
                ffn_b2: expect(&format!("layer{layer}.ffn.b2"), 1, d)?,
            });
        }
        let final_gain = expect("final_norm.gain", 1, d)?;
        let final_shift = expect("final_norm.shift", 1, d)?;
        let head = expect("head.w", d, config.vocab_size)?;
        Ok(Self {
            config,
            store,
            ids: ParamIds { tok_emb, pos_emb, hidden_pad, layers, final_gain, final_shift, head },
        })
    }
}

/// Fresh parameters: embeddings and weight matrices from N(0, 0.02), norm
/// gains 1, shifts and biases 0, hidden pad 0. Draws happen in one fixed
/// insertion order, so a seed fully determines every byte.
pub fn init_params<S: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ModelParams<S>, ModelError> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::<S>::new();
    let d = config.d_model();
    let ff = config.d_ff();
    let randn = |store: &mut ParamStore<S>,
                 rng: &mut R,
                 name: String,
                 rows: usize,
                 cols: usize| {
        let data: Vec<S> = (0..rows * cols).map(|_| S::from_f64(normal.sample(rng))).collect();
        store.insert(name, Tensor::from_vec(rows, cols, data));
    };
    randn(&mut store, rng, "tok_emb".into(), config.vocab_size, config.d_emb);
    if config.positional == PositionalEncoding::Trainable {
        randn(&mut store, rng, "pos_emb".into(), SEQ_LEN, config.d_pos);
    }
    store.insert("hidden_pad", Tensor::zeros(1, config.d_hid));
    for layer in 0..config.num_layers {
        store.insert(format!("layer{layer}.norm1.gain"), Tensor::filled(1, d, S::ONE));
        store.insert(format!("layer{layer}.norm1.shift"), Tensor::zeros(1, d));
        for name in ["wq", "wk", "wv", "wo"] {
            randn(&mut store, rng, format!("layer{layer}.attn.{name}"), d, d);
            store.insert(format!("layer{layer}.attn.b{}", &name[1..]), Tensor::zeros(1, d));
        }
        store.insert(format!("layer{layer}.norm2.gain"), Tensor::filled(1, d, S::ONE));
        store.insert(format!("layer{layer}.norm2.shift"), Tensor::zeros(1, d));
        randn(&mut store, rng, format!("layer{layer}.ffn.w1"), d, ff);
        store.insert(format!("layer{layer}.ffn.b1"), Tensor::zeros(1, ff));
        randn(&mut store, rng, format!("layer{layer}.ffn.w2"), ff, d);
        store.insert(format!("layer{layer}.ffn.b2"), Tensor::zeros(1, d));
    }
    store.insert("final_norm.gain", Tensor::filled(1, d, S::ONE));
    store.insert("final_norm.shift", Tensor::zeros(1, d));
    randn(&mut store, rng, "head.w".into(), d, config.vocab_size);
    ModelParams::from_store(config.clone(), store)
}

/// Moves every parameter to a generic random point: weights, biases, pads,
/// and shifts from N(0, std), norm gains from N(1, std).
pub fn randomize_params<S: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<S>,
    std: f64,
    rng: &mut R,
) {
    let normal = Normal::new(0.0, std).expect("valid std");
    let ids: Vec<ParamId> = params.store.ids().collect();
    for id in ids {
        let name = params.store.name(id).to_string();
        let offset = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        let (rows, cols) = params.store.value(id).shape();
        let data: Vec<S> = (0..rows * cols)
            .map(|_| S::from_f64(offset + normal.sample(rng)))
            .collect();
        params.store.set_value(id, Tensor::from_vec(rows, cols, data));
    }
}

/// Places the model at a random point suitable for central-difference
/// gradient verification.
///
/// The function must be differentiable within the probe step of the point;
/// the only kink in the model is the relu. At the training init biases are
/// exactly zero and many pre-activations sit within the step of the kink,
/// where central differences are biased against the (correct) subgradient.
/// Here the feed-forward input weights get a small scale and their biases
/// alternate +/-1.5, so every pre-activation is several standard deviations
/// from zero: half the units are firmly active, half firmly dead, and no
/// probe can cross the kink.
pub fn prepare_gradcheck_point<S: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<S>,
    rng: &mut R,
) {
    randomize_params(params, 0.15, rng);
    let narrow = Normal::new(0.0, 0.05).expect("valid std");
    for layer in 0..params.config.num_layers {
        let w1 = params
            .store
            .id(&format!("layer{layer}.ffn.w1"))
            .expect("ffn input weights exist");
        let (rows, cols) = params.store.value(w1).shape();
        let data: Vec<S> =
            (0..rows * cols).map(|_| S::from_f64(narrow.sample(rng))).collect();
        params.store.set_value(w1, Tensor::from_vec(rows, cols, data));
        let b1 = params
            .store
            .id(&format!("layer{layer}.ffn.b1"))
            .expect("ffn input biases exist");
        let width = params.store.value(b1).cols();
        let biases = Tensor::from_fn(1, width, |_, c| {
            S::from_f64(if c % 2 == 0 { 1.5 } else { -1.5 })
        });
        params.store.set_value(b1, biases);
    }
}

fn check_tokens<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[[u32; 2]],
) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let vocab = params.config.vocab_size as u32;
    for pair in tokens {
        for &token in pair {
            if token >= vocab {
                return Err(ModelError::TokenOutOfRange {
                    token,
                    vocab_size: params.config.vocab_size,
                });
            }
        }
    }
    Ok(())
}

/// Input embedding for a batch: row `2i + t` is
/// `concat(token_embedding[tokens[i][t]], position_code(t), hidden_pad)`.
pub fn embed_input<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    tokens: &[[u32; 2]],
) -> Result<Var, ModelError> {
    check_tokens(params, tokens)?;
    let batch = tokens.len();
    let flat: Arc<Vec<u32>> = Arc::new(tokens.iter().flatten().copied().collect());
    let tok_table = tape.param(&params.store, params.ids.tok_emb);
    let tok_rows = tape.gather_rows(tok_table, flat);
    let pos_block = match params.ids.pos_emb {
        Some(id) => tape.param(&params.store, id),
        None => tape.constant(Tensor::from_fn(SEQ_LEN, params.config.d_pos, |r, c| {
            if r == c {
                S::ONE
            } else {
                S::ZERO
            }
        })),
    };
    let pos_rows = tape.tile_rows(pos_block, batch);
    let pad = tape.param(&params.store, params.ids.hidden_pad);
    let pad_rows = tape.tile_rows(pad, batch * SEQ_LEN);
    Ok(tape.concat_cols(&[tok_rows, pos_rows, pad_rows]))
}

/// Full forward pass: logits over the vocabulary at the goal-token position,
/// one row per example.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    tokens: &[[u32; 2]],
) -> Result<Var, ModelError> {
    let mut x = embed_input(tape, params, tokens)?;
    let heads = params.config.num_heads;
    for layer in &params.ids.layers {
        let gain1 = tape.param(&params.store, layer.norm1_gain);
        let shift1 = tape.param(&params.store, layer.norm1_shift);
        let normed = tape.layer_norm(x, gain1, shift1);
        let wq = tape.param(&params.store, layer.wq);
        let bq = tape.param(&params.store, layer.bq);
        let wk = tape.param(&params.store, layer.wk);
        let bk = tape.param(&params.store, layer.bk);
        let wv = tape.param(&params.store, layer.wv);
        let bv = tape.param(&params.store, layer.bv);
        let q = tape.matmul_bias(normed, wq, bq);
        let k = tape.matmul_bias(normed, wk, bk);
        let v = tape.matmul_bias(normed, wv, bv);
        let mixed = tape.attention_pairs(q, k, v, heads);
        let wo = tape.param(&params.store, layer.wo);
        let bo = tape.param(&params.store, layer.bo);
        let projected = tape.matmul_bias(mixed, wo, bo);
        x = tape.add(x, projected);

        let gain2 = tape.param(&params.store, layer.norm2_gain);
        let shift2 = tape.param(&params.store, layer.norm2_shift);
        let normed = tape.layer_norm(x, gain2, shift2);
        let w1 = tape.param(&params.store, layer.ffn_w1);
        let b1 = tape.param(&params.store, layer.ffn_b1);
        let w2 = tape.param(&params.store, layer.ffn_w2);
        let b2 = tape.param(&params.store, layer.ffn_b2);
        let hidden = tape.matmul_bias(normed, w1, b1);
        let hidden = tape.relu(hidden);
        let out = tape.matmul_bias(hidden, w2, b2);
        x = tape.add(x, out);
    }
    let gain = tape.param(&params.store, params.ids.final_gain);
    let shift = tape.param(&params.store, params.ids.final_shift);
    let normed = tape.layer_norm(x, gain, shift);
    let goal_rows: Arc<Vec<u32>> =
        Arc::new((0..tokens.len() as u32).map(|i| 2 * i + 1).collect());
    let at_goal = tape.gather_rows(normed, goal_rows);
    let head = tape.param(&params.store, params.ids.head);
    Ok(tape.matmul(at_goal, head))
}

/// Argmax over the whole vocabulary with ties broken toward the lowest id.
pub fn count_correct<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> usize {
    debug_assert_eq!(logits.rows(), targets.len());
    let mut correct = 0;
    for (r, &target) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &value) in row.iter().enumerate() {
            if value > row[best] {
                best = c;
            }
        }
        if best == target as usize {
            correct += 1;
        }
    }
    correct
}

/// Mean cross-entropy of the label tokens and plain argmax accuracy over a
/// batch of encoded examples. Builds a throwaway tape; no gradients.
pub fn loss_and_accuracy<S: Scalar>(
    params: &ModelParams<S>,
    examples: &[([u32; 2], u32)],
) -> Result<(f64, f64), ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let tokens: Vec<[u32; 2]> = examples.iter().map(|(pair, _)| *pair).collect();
    let targets: Vec<u32> = examples.iter().map(|(_, target)| *target).collect();
    let mut tape = Tape::new();
    let logits = forward(&mut tape, params, &tokens)?;
    let loss = tape.cross_entropy_mean(logits, Arc::new(targets.clone()));
    let correct = count_correct(tape.value(logits), &targets);
    Ok((tape.value(loss).item().to_f64(), correct as f64 / examples.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn model_width_arithmetic() {
        let config = ModelConfig::new(32, 102);
        assert_eq!(config.d_model(), 66);
        assert_eq!(config.d_ff(), 66);
        let big = ModelConfig::new(256, 102);
        assert_eq!(big.d_model(), 290);
        assert_eq!(big.d_ff(), 290);
    }

    #[test]
    fn paper_grid_configs_validate() {
        for d_emb in [32, 64, 128, 256, 512, 1024] {
            for n in [50usize, 100, 200, 400, 800] {
                let config = ModelConfig::new(d_emb, n + 2);
                config.validate().unwrap();
                assert_eq!(config.d_model() % config.num_heads, 0);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = ModelConfig::new(32, 102);
        config.num_heads = 5; // 66 % 5 != 0
        assert!(matches!(config.validate(), Err(ModelError::HeadsMismatch { .. })));
        let mut config = ModelConfig::new(32, 102);
        config.dropout = 0.1;
        assert!(matches!(config.validate(), Err(ModelError::DropoutUnsupported(_))));
        let mut config = ModelConfig::new(32, 102);
        config.d_pos = 3;
        assert!(matches!(config.validate(), Err(ModelError::PositionalWidth(3))));
    }

    #[test]
    fn param_count_matches_store() {
        for (d_emb, vocab) in [(8, 12), (32, 102), (64, 52)] {
            let config = ModelConfig::new(d_emb, vocab);
            let params = init_params::<f32, _>(&config, &mut seeded_rng(1)).unwrap();
            assert_eq!(params.store().num_coordinates(), config.param_count());
        }
        let mut config = ModelConfig::new(8, 12);
        config.positional = PositionalEncoding::Trainable;
        let params = init_params::<f32, _>(&config, &mut seeded_rng(1)).unwrap();
        assert_eq!(params.store().num_coordinates(), config.param_count());
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let config = ModelConfig::new(16, 22);
        let a = init_params::<f32, _>(&config, &mut seeded_rng(5)).unwrap();
        let b = init_params::<f32, _>(&config, &mut seeded_rng(5)).unwrap();
        assert_eq!(a.store().snapshot(), b.store().snapshot());
        let c = init_params::<f32, _>(&config, &mut seeded_rng(6)).unwrap();
        assert_ne!(a.store().snapshot(), c.store().snapshot());
    }

    #[test]
    fn embedding_layout_and_zero_pad() {
        let config = ModelConfig::new(8, 12);
        let params = init_params::<f64, _>(&config, &mut seeded_rng(2)).unwrap();
        let mut tape = Tape::new();
        let rows = embed_input(&mut tape, &params, &[[3, 7], [3, 3]]).unwrap();
        let value = tape.value(rows).clone();
        assert_eq!(value.shape(), (4, 8 + 2 + 32));
        // Positional one-hot columns.
        assert_eq!(value.get(0, 8), 1.0);
        assert_eq!(value.get(0, 9), 0.0);
        assert_eq!(value.get(1, 8), 0.0);
        assert_eq!(value.get(1, 9), 1.0);
        // Hidden pad initializes to zero.
        for c in 10..42 {
            assert_eq!(value.get(0, c), 0.0);
        }
        // Rows for the same token differ only in the positional columns.
        for c in 0..8 {
            assert_eq!(value.get(2, c), value.get(3, c));
        }
        assert_ne!(value.row(2)[8..10], value.row(3)[8..10]);
    }

    #[test]
    fn logits_shape_and_zero_head_uniformity() {
        let config = ModelConfig::new(8, 12);
        let mut params = init_params::<f64, _>(&config, &mut seeded_rng(3)).unwrap();
        let head = params.store().id("head.w").unwrap();
        let d = config.d_model();
        params.store_mut().set_value(head, Tensor::zeros(d, 12));
        let mut tape = Tape::new();
        let logits = forward(&mut tape, &params, &[[0, 1], [5, 9]]).unwrap();
        let value = tape.value(logits);
        assert_eq!(value.shape(), (2, 12));
        for &v in value.data() {
            assert_eq!(v, 0.0, "zeroed head gives identical logits everywhere");
        }
    }

    #[test]
    fn duplicated_embedding_row_gives_identical_logits() {
        let config = ModelConfig::new(8, 12);
        let mut params = init_params::<f64, _>(&config, &mut seeded_rng(4)).unwrap();
        // Copy token 3's embedding onto unused token 7.
        let tok = params.store().id("tok_emb").unwrap();
        let mut table = params.store().value(tok).clone();
        let row3: Vec<f64> = table.row(3).to_vec();
        table.data_mut()[7 * 8..8 * 8].copy_from_slice(&row3);
        params.store_mut().set_value(tok, table);

        let mut tape = Tape::new();
        let a = forward(&mut tape, &params, &[[3, 5]]).unwrap();
        let b = forward(&mut tape, &params, &[[7, 5]]).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn residual_stream_passes_through_with_zeroed_output_projections() {
        let config = ModelConfig::new(8, 12);
        let mut params = init_params::<f64, _>(&config, &mut seeded_rng(5)).unwrap();
        let d = config.d_model();
        for layer in 0..config.num_layers {
            for name in [format!("layer{layer}.attn.wo"), format!("layer{layer}.ffn.w2")] {
                let id = params.store().id(&name).unwrap();
                let (rows, cols) = params.store().value(id).shape();
                params.store_mut().set_value(id, Tensor::zeros(rows, cols));
            }
            for name in [format!("layer{layer}.attn.bo"), format!("layer{layer}.ffn.b2")] {
                let id = params.store().id(&name).unwrap();
                params.store_mut().set_value(id, Tensor::zeros(1, d));
            }
        }
        let tokens = [[2u32, 9], [0, 4]];
        let mut tape = Tape::new();
        let logits = forward(&mut tape, &params, &tokens).unwrap();

        // Manual path: final_norm(embedding) through the head.
        let embedded = embed_input(&mut tape, &params, &tokens).unwrap();
        let gain = tape.param(params.store(), params.store().id("final_norm.gain").unwrap());
        let shift = tape.param(params.store(), params.store().id("final_norm.shift").unwrap());
        let normed = tape.layer_norm(embedded, gain, shift);
        let goals = tape.gather_rows(normed, Arc::new(vec![1, 3]));
        let head = tape.param(params.store(), params.store().id("head.w").unwrap());
        let expected = tape.matmul(goals, head);

        for (a, b) in tape.value(logits).data().iter().zip(tape.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let config = ModelConfig::new(8, 12);
        let mut params = init_params::<f64, _>(&config, &mut seeded_rng(6)).unwrap();
        let tokens = [[0u32, 1], [2, 3], [4, 5], [9, 0], [1, 7]];
        let targets = Arc::new(vec![10u32, 11, 10, 11, 10]);
        let ids: Vec<ParamId> = params.store().ids().collect();
        let mut tape = Tape::new();
        let logits = forward(&mut tape, &params, &tokens).unwrap();
        let loss = tape.cross_entropy_mean(logits, targets);
        tape.backward(loss, params.store_mut()).unwrap();
        for id in ids {
            let grad = params.store().grad(id);
            assert!(
                grad.iter().any(|g| *g != 0.0),
                "parameter {} received no gradient",
                params.store().name(id)
            );
        }
        let pad = params.store().id("hidden_pad").unwrap();
        assert!(params.store().grad(pad).iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn loss_and_accuracy_mean_invariance() {
        let config = ModelConfig::new(8, 12);
        let params = init_params::<f64, _>(&config, &mut seeded_rng(7)).unwrap();
        let batch = vec![([0u32, 1], 10u32), ([2, 3], 11), ([7, 9], 10)];
        let (loss_once, acc_once) = loss_and_accuracy(&params, &batch).unwrap();
        let doubled: Vec<_> = batch.iter().chain(&batch).copied().collect();
        let (loss_twice, acc_twice) = loss_and_accuracy(&params, &doubled).unwrap();
        assert!((loss_once - loss_twice).abs() < 1e-12);
        assert!((acc_once - acc_twice).abs() < 1e-12);
        assert!(loss_and_accuracy(&params, &[]).is_err());
    }

    #[test]
    fn flop_formula_reference_values() {
        // d_emb 32, n = 100: hand-evaluated frozen formula.
        let config = ModelConfig::new(32, 102);
        assert_eq!(flops_per_example(&config), 357_192);
        // Doubling d_emb strictly increases the count at fixed vocabulary.
        let wider = ModelConfig::new(64, 102);
        assert!(flops_per_example(&wider) > flops_per_example(&config));
        // Independent recomputation, different association order.
        let d = 66u64;
        let independent = 3 * (2 * (8 * d * d + 4 * d * d + 8 * d) + 2 * d * 102);
        assert_eq!(flops_per_example(&config), independent);
    }

    #[test]
    fn token_range_is_checked() {
        let config = ModelConfig::new(8, 12);
        let params = init_params::<f32, _>(&config, &mut seeded_rng(8)).unwrap();
        let mut tape = Tape::new();
        let err = forward(&mut tape, &params, &[[0, 12]]).unwrap_err();
        assert_eq!(err, ModelError::TokenOutOfRange { token: 12, vocab_size: 12 });
    }

    #[test]
    fn trainable_positions_participate_in_training() {
        let mut config = ModelConfig::new(8, 12);
        config.positional = PositionalEncoding::Trainable;
        let mut params = init_params::<f64, _>(&config, &mut seeded_rng(9)).unwrap();
        let pos = params.store().id("pos_emb").unwrap();
        assert_eq!(params.store().value(pos).shape(), (2, 2));
        let mut tape = Tape::new();
        let logits = forward(&mut tape, &params, &[[0, 1], [3, 4]]).unwrap();
        let loss = tape.cross_entropy_mean(logits, Arc::new(vec![10, 11]));
        tape.backward(loss, params.store_mut()).unwrap();
        assert!(params.store().grad(pos).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        use crate::numerics::{finite_difference_check, ParamStore};

        let config = ModelConfig::new(8, 12);
        let mut params = init_params::<f64, _>(&config, &mut seeded_rng(40)).unwrap();
        prepare_gradcheck_point(&mut params, &mut seeded_rng(41));
        let tokens: Vec<[u32; 2]> =
            (0..48).map(|i| [(i % 10) as u32, ((i * 3 + 1) % 10) as u32]).collect();
        let targets: Arc<Vec<u32>> =
            Arc::new((0..48).map(|i| 10 + (i % 2) as u32).collect());

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let rebound = ModelParams::from_store(config.clone(), store.clone()).unwrap();
            let mut tape = Tape::new();
            let logits = forward(&mut tape, &rebound, &tokens).unwrap();
            let loss = tape.cross_entropy_mean(logits, targets.clone());
            tape.value(loss).item()
        };
        {
            let mut tape = Tape::new();
            let logits = forward(&mut tape, &params, &tokens).unwrap();
            let loss = tape.cross_entropy_mean(logits, targets.clone());
            tape.backward(loss, params.store_mut()).unwrap();
        }
        let report = finite_difference_check(
            params.store_mut(),
            loss_of,
            1e-4,
            256,
            &mut seeded_rng(42),
        );
        assert!(report.coords_checked >= 200);
        assert!(
            report.max_rel_error < 1e-3,
            "max rel {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}
