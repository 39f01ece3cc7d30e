use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_full, mlm_logits_full, Batch, EncoderWeights, ModelConfig};
use crate::engine::optim::{lr_schedule, AdamW, AdamWConfig, Param};
use crate::error::{Error, Result};
use crate::tasks::{CLS, MASK, PAD, SEP, SPECIALS};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_rate: f64,
    pub weight_decay: f64,
    pub mlm_prob: f64,
    /// Selection probability for tokens in `salient_ids` (salient-token
    /// masking); every other maskable token uses `mlm_prob`.
    pub salient_prob: f64,
    pub salient_ids: Vec<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 32,
            peak_lr: 2e-3,
            warmup_rate: 0.06,
            weight_decay: 0.01,
            mlm_prob: 0.15,
            salient_prob: 0.15,
            salient_ids: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmEval {
    pub loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

fn maskable(id: usize) -> bool {
    !matches!(id, PAD | CLS | SEP)
}

/// Which tokens get masked, and how often.
#[derive(Clone, Copy)]
struct MaskPolicy<'a> {
    prob: f64,
    salient_prob: f64,
    salient: &'a [usize],
}

impl MaskPolicy<'_> {
    fn uniform(prob: f64) -> MaskPolicy<'static> {
        MaskPolicy {
            prob,
            salient_prob: prob,
            salient: &[],
        }
    }

    fn prob_for(&self, id: usize) -> f64 {
        if self.salient.contains(&id) {
            self.salient_prob
        } else {
            self.prob
        }
    }
}

/// MLM corruption: each maskable position is selected with its policy
/// probability; selected tokens become `[MASK]` 80% of the time, a random
/// word 10%, and stay unchanged 10%. Returns the corrupted sequence and
/// `(position, original id)` targets.
fn corrupt(seq: &[usize], vocab: usize, policy: MaskPolicy<'_>, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut out = seq.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in seq.iter().enumerate() {
        if !maskable(id) || !rng.gen_bool(policy.prob_for(id)) {
            continue;
        }
        targets.push((pos, id));
        let r: f64 = rng.gen();
        out[pos] = if r < 0.8 {
            MASK
        } else if r < 0.9 {
            rng.gen_range(SPECIALS.len()..vocab)
        } else {
            id
        };
    }
    if targets.is_empty() {
        if let Some(pos) = (0..seq.len()).filter(|&p| maskable(seq[p])).nth(0) {
            targets.push((pos, seq[pos]));
            out[pos] = MASK;
        }
    }
    (out, targets)
}

fn masked_batch(
    docs: &[&Vec<usize>],
    config: &ModelConfig,
    policy: MaskPolicy<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, Vec<usize>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(docs.len());
    let mut targets = Vec::new();
    for doc in docs {
        let doc = &doc[..doc.len().min(config.max_seq_len)];
        let (input, t) = corrupt(doc, config.vocab_size, policy, rng);
        targets.push(t);
        inputs.push(input);
    }
    let batch = Batch::pad(&inputs)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for &(pos, id) in t {
            rows.push(b * batch.seq_len + pos);
            labels.push(id);
        }
    }
    Ok((batch, rows, labels))
}

/// Trains a fresh backbone on `corpus` with masked-language modelling.
/// Seeded end to end: equal inputs give bitwise-equal weights.
pub fn pretrain_toy(
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    pcfg: &PretrainConfig,
) -> Result<(EncoderWeights, PretrainReport)> {
    config.validate()?;
    if pcfg.batch_size == 0 || corpus.len() < pcfg.batch_size {
        return Err(Error::Config(format!(
            "pretraining corpus has {} documents, fewer than one batch of {}",
            corpus.len(),
            pcfg.batch_size
        )));
    }
    if let Some(bad) = corpus.iter().flatten().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Config(format!("corpus token {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let mut weights = EncoderWeights::init(config, pcfg.seed)?;
    let mut params: Vec<Param> = weights
        .named()
        .into_iter()
        .map(|(n, t)| Param::new(n, t.clone()))
        .collect();
    let adam_cfg = AdamWConfig {
        weight_decay: pcfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam_cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = PretrainReport::default();
    if !(0.0..=1.0).contains(&pcfg.mlm_prob) || !(0.0..=1.0).contains(&pcfg.salient_prob) {
        return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
    }
    let policy = MaskPolicy {
        prob: pcfg.mlm_prob,
        salient_prob: pcfg.salient_prob,
        salient: &pcfg.salient_ids,
    };

    for step in 0..pcfg.steps {
        let docs: Vec<&Vec<usize>> = (0..pcfg.batch_size)
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();
        let (batch, rows, labels) = masked_batch(&docs, config, policy, &mut rng)?;

        let mut tape = Tape::new();
        let leaves = weights.map(|t| tape.leaf(t));
        let states = forward_full(&mut tape, &leaves, config, &batch)?;
        let logits = mlm_logits_full(&mut tape, &leaves, &states, &rows)?;
        let loss = tape.cross_entropy(&logits, &labels)?;
        let lr = lr_schedule(step, pcfg.steps, pcfg.peak_lr, pcfg.warmup_rate);
        if !loss.item().is_finite() {
            return Err(Error::Divergence { step, lr });
        }
        report.losses.push(loss.item());

        let grads = tape.backward(&loss)?;
        let grads: Vec<(String, crate::tensor::Tensor)> = leaves
            .named()
            .into_iter()
            .map(|(name, leaf)| {
                let g = grads
                    .get(leaf)
                    .cloned()
                    .unwrap_or_else(|| crate::tensor::Tensor::zeros(leaf.shape().to_vec()));
                (name, g)
            })
            .collect();
        opt.step(&mut params, &grads, lr)?;
        weights = EncoderWeights::from_ordered(params.iter().map(|p| p.value.clone()).collect(), config.n_layers)?;
    }
    Ok((weights, report))
}

/// Masked-token loss and recovery accuracy on `corpus` with a fixed,
/// seeded corruption pattern.
pub fn mlm_eval(
    weights: &EncoderWeights,
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    mlm_prob: f64,
    seed: u64,
) -> Result<MlmEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_loss = 0.0;
    let mut correct = 0;
    let mut masked = 0;
    for chunk in corpus.chunks(64) {
        let docs: Vec<&Vec<usize>> = chunk.iter().collect();
        let (batch, rows, labels) = masked_batch(&docs, config, MaskPolicy::uniform(mlm_prob), &mut rng)?;
        let mut tape = Tape::new();
        tape.set_recording(false);
        let states = forward_full(&mut tape, weights, config, &batch)?;
        let logits = mlm_logits_full(&mut tape, weights, &states, &rows)?;
        let loss = tape.cross_entropy(&logits, &labels)?;
        total_loss += loss.item() * labels.len() as f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += usize::from(pred == y);
        }
        masked += labels.len();
    }
    if masked == 0 {
        return Err(Error::Contract("evaluation corpus has no maskable tokens".into()));
    }
    Ok(MlmEval {
        loss: total_loss / masked as f64,
        accuracy: correct as f64 / masked as f64,
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_only_touches_content_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = vec![CLS, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, SEP];
        for _ in 0..100 {
            let (out, targets) = corrupt(&seq, 50, MaskPolicy::uniform(0.15), &mut rng);
            assert!(!targets.is_empty());
            assert_eq!(out[0], CLS);
            assert_eq!(*out.last().unwrap(), SEP);
            for &(p, id) in &targets {
                assert_eq!(seq[p], id);
                assert!(p > 0 && p < seq.len() - 1);
            }
        }
    }

    #[test]
    fn salient_tokens_are_masked_more_often() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = vec![CLS, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, SEP];
        let policy = MaskPolicy {
            prob: 0.1,
            salient_prob: 0.9,
            salient: &[19],
        };
        let (mut hit_salient, mut hit_other) = (0, 0);
        for _ in 0..2000 {
            let (_, targets) = corrupt(&seq, 50, policy, &mut rng);
            hit_salient += targets.iter().filter(|t| t.1 == 19).count();
            hit_other += targets.iter().filter(|t| t.1 == 10).count();
        }
        assert!(hit_salient > 1700, "{hit_salient}");
        assert!(hit_other < 400, "{hit_other}");
    }

    #[test]
    fn rejects_tiny_corpus() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 20,
            max_seq_len: 8,
        };
        let corpus = vec![vec![CLS, 7, SEP]; 3];
        let err = pretrain_toy(&cfg, &corpus, &PretrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
