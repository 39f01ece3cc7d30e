use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Backbone;
use crate::engine::{Budget, EncodedSet, PreparedBatch, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::prompting::{count_tunable, Method, PromptSpec};
use crate::tasks::{Encoded, CLS, MASK, SEP, SPECIALS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Input length of every example (prompt rows come on top).
    pub seq_len: usize,
    pub batch_size: usize,
    /// Total steps, including the untimed warmup.
    pub steps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_len: 128,
            batch_size: 4,
            steps: 220,
            warmup: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub method: Method,
    pub layer: usize,
    pub prompt_len: usize,
    pub tunable_params: usize,
    pub tokens_per_ms: f64,
    /// Bytes of activations recorded on the tape in one step.
    pub activation_bytes: usize,
    pub backward_layer_count: usize,
    pub timed_steps: usize,
    pub seq_len: usize,
    pub batch_size: usize,
}

/// A fixed-length batch of random tokens with `[MASK]` just before `[SEP]`.
fn synthetic_batch(vocab_size: usize, cfg: &BenchConfig) -> Result<(EncodedSet, PreparedBatch)> {
    let first = SPECIALS.len();
    if cfg.seq_len < 3 || vocab_size <= first + 2 {
        return Err(Error::Config("bench.seq_len must be at least 3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let mut ids = vec![CLS];
        ids.extend((0..cfg.seq_len - 3).map(|_| rng.gen_range(first..vocab_size)));
        ids.extend([MASK, SEP]);
        items.push(Encoded {
            mask_pos: cfg.seq_len - 2,
            ids,
        });
        labels.push(rng.gen_range(0..2));
    }
    let set = EncodedSet { items, labels };
    let all: Vec<usize> = (0..cfg.batch_size).collect();
    let prepared = set.batch(&all)?;
    debug_assert_eq!(prepared.batch.seq_len, cfg.seq_len);
    Ok((set, prepared))
}

/// Times `cfg.steps − cfg.warmup` training steps on one fixed batch.
/// Single-threaded by construction: every step runs on the calling thread.
pub fn bench(backbone: &Backbone, spec: PromptSpec, cfg: &BenchConfig) -> Result<EfficiencyReport> {
    if cfg.steps <= cfg.warmup {
        return Err(Error::Config(format!(
            "bench.steps ({}) must exceed bench.warmup ({})",
            cfg.steps, cfg.warmup
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("bench.batch_size must be at least 1".into()));
    }
    spec.validate(&backbone.config)?;
    if cfg.seq_len + spec.l > backbone.config.max_seq_len {
        return Err(Error::Config(format!(
            "bench.seq_len {} plus {} prompt rows exceeds model.max_seq_len {}",
            cfg.seq_len, spec.l, backbone.config.max_seq_len
        )));
    }
    let (set, prepared) = synthetic_batch(backbone.config.vocab_size, cfg)?;
    let verbalizer = vec![SPECIALS.len(), SPECIALS.len() + 1];
    let train_cfg = TrainConfig {
        budget: Budget::Steps(cfg.steps),
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(backbone, &set, verbalizer, spec, train_cfg)?;
    for _ in 0..cfg.warmup {
        trainer.step_on(&prepared)?;
    }
    let mut tokens = 0usize;
    let mut last = None;
    let start = Instant::now();
    for _ in cfg.warmup..cfg.steps {
        let stats = trainer.step_on(&prepared)?;
        tokens += stats.tokens;
        last = Some(stats);
    }
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let last = last.expect("at least one timed step");
    Ok(EfficiencyReport {
        method: spec.method,
        layer: spec.k,
        prompt_len: spec.l,
        tunable_params: count_tunable(&spec, &backbone.config),
        tokens_per_ms: tokens as f64 / elapsed_ms,
        activation_bytes: last.activation_bytes,
        backward_layer_count: last.layer_backward_count,
        timed_steps: cfg.steps - cfg.warmup,
        seq_len: cfg.seq_len,
        batch_size: cfg.batch_size,
    })
}
