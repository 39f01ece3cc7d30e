//! Pre-LayerNorm transformer encoder with a tied masked-language-model head.
//!
//! The forward pass can be split at any layer boundary `k`:
//! [`forward_lower`] runs the embeddings and layers `1..k` with nothing
//! recorded, and [`forward_upper`] runs layers `k..=L` plus the final norm on
//! the caller's tape. Layer numbers are 1-based throughout; `k = L + 1`
//! means "after the last layer".

mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tasks::PAD;
use crate::tensor::{Tape, Tensor};
pub use pretrain::{mlm_eval, pretrain_toy, MlmEval, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The 12-layer, width-64 toy backbone.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: crate::tasks::toy::TOY_VOCAB_SIZE,
            max_seq_len: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size <= crate::tasks::SPECIALS.len() {
            return Err(Error::Config("model.vocab_size must exceed the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Weights of one transformer block. Projections are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff1: Tensor,
    pub ff1_bias: Tensor,
    pub ff2: Tensor,
    pub ff2_bias: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias",
    "ff1", "ff1_bias", "ff2", "ff2_bias",
];

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff1,
            &self.ff1_bias,
            &self.ff2,
            &self.ff2_bias,
        ]
    }

    fn from_tensors(mut t: impl Iterator<Item = Tensor>) -> Self {
        let mut next = || t.next().expect("16 layer tensors");
        LayerWeights {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            ff1: next(),
            ff1_bias: next(),
            ff2: next(),
            ff2_bias: next(),
        }
    }
}

/// Backbone parameters. The MLM head reuses `token_emb` and adds `mlm_bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub mlm_bias: Tensor,
}

impl EncoderWeights {
    /// Fan-in scaled normal matrices, with the two residual output
    /// projections further scaled by `1/√(2L)`; N(0, 0.1²) embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let standard = Normal::new(0.0, 1.0).expect("valid std");
        let mut randn = |shape: Vec<usize>, std: f64| {
            let n = shape.iter().product();
            Tensor::from_parts(shape, (0..n).map(|_| std * standard.sample(&mut rng)).collect())
        };
        let (d, f) = (config.d_model, config.d_ff);
        let (in_d, in_f) = (1.0 / (d as f64).sqrt(), 1.0 / (f as f64).sqrt());
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let token_emb = randn(vec![config.vocab_size, d], 0.1);
        let pos_emb = randn(vec![config.max_seq_len, d], 0.1);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full([d], 1.0),
                ln1_bias: Tensor::zeros([d]),
                wq: randn(vec![d, d], in_d),
                bq: Tensor::zeros([d]),
                wk: randn(vec![d, d], in_d),
                bk: Tensor::zeros([d]),
                wv: randn(vec![d, d], in_d),
                bv: Tensor::zeros([d]),
                wo: randn(vec![d, d], in_d * residual),
                bo: Tensor::zeros([d]),
                ln2_gain: Tensor::full([d], 1.0),
                ln2_bias: Tensor::zeros([d]),
                ff1: randn(vec![f, d], in_d),
                ff1_bias: Tensor::zeros([f]),
                ff2: randn(vec![d, f], in_f * residual),
                ff2_bias: Tensor::zeros([d]),
            })
            .collect();
        Ok(EncoderWeights {
            token_emb,
            pos_emb,
            layers,
            final_gain: Tensor::full([d], 1.0),
            final_bias: Tensor::zeros([d]),
            mlm_bias: Tensor::zeros([config.vocab_size]),
        })
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.token_emb".to_string(), &self.token_emb),
            ("encoder.pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("encoder.layer{i}.{field}"), t));
            }
        }
        out.push(("encoder.final_gain".into(), &self.final_gain));
        out.push(("encoder.final_bias".into(), &self.final_bias));
        out.push(("encoder.mlm_bias".into(), &self.mlm_bias));
        out
    }

    /// Rebuilds weights from tensors in [`EncoderWeights::named`] order.
    pub fn from_ordered(tensors: Vec<Tensor>, n_layers: usize) -> Result<Self> {
        let expected = 5 + 16 * n_layers;
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} encoder tensors for {n_layers} layers, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let token_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let layers = (0..n_layers).map(|_| LayerWeights::from_tensors(it.by_ref())).collect();
        Ok(EncoderWeights {
            token_emb,
            pos_emb,
            layers,
            final_gain: it.next().unwrap(),
            final_bias: it.next().unwrap(),
            mlm_bias: it.next().unwrap(),
        })
    }

    /// Applies `f` to every tensor, preserving structure and order.
    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        let tensors = self.named().into_iter().map(|(_, t)| f(t)).collect();
        Self::from_ordered(tensors, self.layers.len()).expect("same structure")
    }

    /// Infers the architecture from tensor shapes (heads are not recorded
    /// in the weights and must be supplied).
    pub fn config(&self, n_heads: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers.len(),
            d_model: self.token_emb.shape()[1],
            n_heads,
            d_ff: self.layers.first().map_or(0, |l| l.ff1.shape()[0]),
            vocab_size: self.token_emb.shape()[0],
            max_seq_len: self.pos_emb.shape()[0],
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every layer and the final norm must match the config.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let fresh = EncoderWeights::init(config, 0)?;
        for ((name, a), (_, b)) in self.named().iter().zip(fresh.named()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?} but the model config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "weights have {} layers, config says {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        Ok(())
    }
}

/// Frozen weights together with the geometry they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub weights: EncoderWeights,
}

impl Backbone {
    pub fn new(config: ModelConfig, weights: EncoderWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Backbone { config, weights })
    }
}

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Right-pads every sequence to the longest one.
    pub fn pad(sequences: &[Vec<usize>]) -> Result<Self> {
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if sequences.is_empty() || seq_len == 0 || sequences.iter().any(Vec::is_empty) {
            return Err(Error::Contract("batch needs at least one non-empty sequence each".into()));
        }
        Self::pad_to(sequences, seq_len)
    }

    pub fn pad_to(sequences: &[Vec<usize>], seq_len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(sequences.len() * seq_len);
        let mut mask = Vec::with_capacity(ids.capacity());
        for s in sequences {
            if s.is_empty() || s.len() > seq_len {
                return Err(Error::Contract(format!("sequence of length {} in a batch of {seq_len}", s.len())));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(seq_len - s.len()));
            mask.extend(std::iter::repeat(true).take(s.len()));
            mask.extend(std::iter::repeat(false).take(seq_len - s.len()));
        }
        Ok(Batch {
            ids,
            mask,
            batch: sequences.len(),
            seq_len,
        })
    }

    /// Non-padding count per sequence.
    pub fn valid_lengths(&self) -> Vec<usize> {
        self.mask.chunks(self.seq_len).map(|m| m.iter().filter(|&&x| x).count()).collect()
    }
}

/// Row geometry of hidden states: `batch` segments of `seq_len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub seq_len: usize,
    pub mask: Vec<bool>,
}

impl From<&Batch> for Layout {
    fn from(b: &Batch) -> Self {
        Layout {
            batch: b.batch,
            seq_len: b.seq_len,
            mask: b.mask.clone(),
        }
    }
}

fn check_layer_index(k: usize, config: &ModelConfig) -> Result<()> {
    if k == 0 || k > config.n_layers + 1 {
        return Err(Error::Config(format!(
            "prompt layer {k} outside 1..={} for a {}-layer encoder",
            config.n_layers + 1,
            config.n_layers
        )));
    }
    Ok(())
}

/// Token plus positional embeddings, `(batch · seq_len) × d`.
pub fn embed(tape: &mut Tape, w: &EncoderWeights, config: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    if batch.seq_len > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds model.max_seq_len {}",
            batch.seq_len, config.max_seq_len
        )));
    }
    let tok = tape.embedding(&w.token_emb, &batch.ids)?;
    let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
    let pos = tape.embedding(&w.pos_emb, &positions)?;
    tape.add(&tok, &pos)
}

/// One pre-LN block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn layer_forward(
    tape: &mut Tape,
    lw: &LayerWeights,
    config: &ModelConfig,
    x: &Tensor,
    layout: &Layout,
) -> Result<Tensor> {
    let h = tape.layer_norm(x, &lw.ln1_gain, &lw.ln1_bias)?;
    let q = tape.linear(&h, &lw.wq, Some(&lw.bq))?;
    let k = tape.linear(&h, &lw.wk, Some(&lw.bk))?;
    let v = tape.linear(&h, &lw.wv, Some(&lw.bv))?;
    let a = tape.attention(&q, &k, &v, layout.batch, layout.seq_len, config.n_heads, &layout.mask)?;
    let o = tape.linear(&a, &lw.wo, Some(&lw.bo))?;
    let x = tape.add(x, &o)?;
    let h = tape.layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias)?;
    let f = tape.linear(&h, &lw.ff1, Some(&lw.ff1_bias))?;
    let f = tape.relu(&f);
    let f = tape.linear(&f, &lw.ff2, Some(&lw.ff2_bias))?;
    tape.add(&x, &f)
}

/// Runs layers `from..to` (1-based, half-open) on the given tape.
pub fn run_layers(
    tape: &mut Tape,
    w: &EncoderWeights,
    config: &ModelConfig,
    mut x: Tensor,
    layout: &Layout,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    for lw in &w.layers[from - 1..to - 1] {
        x = tape.layer_mark(&x);
        x = layer_forward(tape, lw, config, &x, layout)?;
    }
    Ok(x)
}

/// Hidden states entering layer `k`, computed with nothing recorded.
pub fn forward_lower(w: &EncoderWeights, config: &ModelConfig, batch: &Batch, k: usize) -> Result<Tensor> {
    check_layer_index(k, config)?;
    let mut tape = Tape::new();
    tape.set_recording(false);
    let x = embed(&mut tape, w, config, batch)?;
    run_layers(&mut tape, w, config, x, &Layout::from(batch), 1, k)
}

/// Layers `k..=L` and the final norm, recorded on `tape`. Frozen weights
/// enter as constants, so only graph inputs that already carry a handle
/// (the prompt) make anything get recorded.
pub fn forward_upper(
    tape: &mut Tape,
    w: &EncoderWeights,
    config: &ModelConfig,
    hidden: &Tensor,
    layout: &Layout,
    k: usize,
) -> Result<Tensor> {
    check_layer_index(k, config)?;
    let (rows, d) = hidden.expect_matrix("forward_upper")?;
    if d != config.d_model || rows != layout.batch * layout.seq_len || layout.mask.len() != rows {
        return Err(Error::Shape {
            op: "forward_upper",
            lhs: hidden.shape().to_vec(),
            rhs: vec![layout.batch, layout.seq_len, config.d_model],
        });
    }
    let x = run_layers(tape, w, config, hidden.clone(), layout, k, config.n_layers + 1)?;
    tape.layer_norm(&x, &w.final_gain, &w.final_bias)
}

/// Monolithic forward through every layer and the final norm.
pub fn forward_full(tape: &mut Tape, w: &EncoderWeights, config: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    let x = embed(tape, w, config, batch)?;
    let layout = Layout::from(batch);
    let x = run_layers(tape, w, config, x, &layout, 1, config.n_layers + 1)?;
    tape.layer_norm(&x, &w.final_gain, &w.final_bias)
}

/// Tied-embedding MLM logits at `rows`, restricted to `token_ids` (in order).
pub fn mlm_logits_at(
    tape: &mut Tape,
    w: &EncoderWeights,
    final_states: &Tensor,
    rows: &[usize],
    token_ids: &[usize],
) -> Result<Tensor> {
    if token_ids.is_empty() {
        return Err(Error::Contract("empty verbalizer".into()));
    }
    let n = final_states.rows();
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Contract(format!("mask position {bad} outside {n} rows")));
    }
    let h = tape.gather_rows(final_states, rows)?;
    let emb = tape.gather_rows(&w.token_emb, token_ids)?;
    let bias_rows = Tensor::from_parts(vec![w.mlm_bias.len(), 1], w.mlm_bias.to_vec());
    let bias = tape.gather_rows(&bias_rows, token_ids)?;
    let bias = tape.reshape(&bias, &[token_ids.len()])?;
    tape.linear(&h, &emb, Some(&bias))
}

/// Full-vocabulary MLM logits at `rows`.
pub fn mlm_logits_full(tape: &mut Tape, w: &EncoderWeights, final_states: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let h = tape.gather_rows(final_states, rows)?;
    tape.linear(&h, &w.token_emb, Some(&w.mlm_bias))
}

/// Attention probabilities of layer `layer` (1-based) for input `x`,
/// laid out `[batch][head][query][key]`.
pub fn attention_probs(
    w: &EncoderWeights,
    config: &ModelConfig,
    layer: usize,
    x: &Tensor,
    layout: &Layout,
) -> Result<Vec<f64>> {
    let lw = &w.layers[layer - 1];
    let mut tape = Tape::new();
    tape.set_recording(false);
    let h = tape.layer_norm(x, &lw.ln1_gain, &lw.ln1_bias)?;
    let q = tape.linear(&h, &lw.wq, Some(&lw.bq))?;
    let k = tape.linear(&h, &lw.wk, Some(&lw.bk))?;
    Ok(crate::tensor::ops_attention_probs(
        &q,
        &k,
        layout.batch,
        layout.seq_len,
        config.n_heads,
        &layout.mask,
    ))
}
