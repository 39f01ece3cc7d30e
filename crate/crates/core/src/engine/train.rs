use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::encoder::{forward_lower, forward_upper, mlm_logits_at, Backbone, Batch, Layout};
use crate::error::{Error, Result};
use crate::prompting::{count_tunable, PromptModule, PromptSpec};
use crate::tasks::{Encoded, Example, Metric, Split, TaskSpec, Vocab};
use crate::tensor::{Tape, Tensor};

/// How long to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub budget: Budget,
    /// Dev evaluation cadence in steps for step budgets; epoch budgets
    /// evaluate once per epoch.
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 5e-3,
            warmup_rate: 0.06,
            batch_size: 16,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            budget: Budget::Steps(1000),
            eval_every: 50,
            eval_batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("train.{field} {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be at least 1");
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Epochs(0)) {
            return bad("budget", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_rate) {
            return bad("warmup_rate", "must lie in [0, 1)");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// `(total steps, steps between dev evaluations)` for `n_train` examples.
    pub fn schedule(&self, n_train: usize) -> (usize, usize) {
        match self.budget {
            Budget::Steps(s) => (s, self.eval_every),
            Budget::Epochs(e) => {
                let per_epoch = n_train.div_ceil(self.batch_size).max(1);
                (e * per_epoch, per_epoch)
            }
        }
    }
}

/// Templated examples with their labels, ready for batching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSet {
    pub items: Vec<Encoded>,
    pub labels: Vec<usize>,
}

impl EncodedSet {
    /// Encodes `examples`, leaving room for `prompt_len` prompt rows within
    /// the model's `max_seq_len`.
    pub fn new(
        vocab: &Vocab,
        task: &TaskSpec,
        examples: &[Example],
        max_seq_len: usize,
        prompt_len: usize,
    ) -> Result<Self> {
        let max_len = max_seq_len.checked_sub(prompt_len).filter(|&n| n >= 3).ok_or_else(|| {
            Error::Config(format!("prompt length {prompt_len} leaves no room in max_seq_len {max_seq_len}"))
        })?;
        let n_labels = task.num_labels();
        let mut items = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.label >= n_labels {
                return Err(Error::Contract(format!(
                    "label {} outside the {n_labels} labels of {}",
                    ex.label, task.name
                )));
            }
            items.push(task.encode(vocab, ex, max_len)?);
            labels.push(ex.label);
        }
        Ok(EncodedSet { items, labels })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Padded batch of the examples at `idx`, with mask positions and labels.
    pub fn batch(&self, idx: &[usize]) -> Result<PreparedBatch> {
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| self.items[i].ids.clone()).collect();
        Ok(PreparedBatch {
            batch: Batch::pad(&seqs)?,
            mask_pos: idx.iter().map(|&i| self.items[i].mask_pos).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub batch: Batch,
    pub mask_pos: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Class scores at the mask positions for one batch: run the frozen lower
/// stack (or reuse `lower`), insert the prompt, run the recorded upper
/// stack, read out the verbalizer logits.
pub fn class_logits(
    tape: &mut Tape,
    backbone: &Backbone,
    module: &PromptModule,
    prepared: &PreparedBatch,
    verbalizer: &[usize],
    lower: Option<&Tensor>,
) -> Result<Tensor> {
    let k = module.spec.k;
    let (cfg, w) = (&backbone.config, &backbone.weights);
    let hidden = match lower {
        Some(h) => h.clone(),
        None => forward_lower(w, cfg, &prepared.batch, k)?,
    };
    let (x, layout, shift) = module.prompted_input(tape, &hidden, &Layout::from(&prepared.batch))?;
    let out = forward_upper(tape, w, cfg, &x, &layout, k)?;
    let rows: Vec<usize> = prepared
        .mask_pos
        .iter()
        .enumerate()
        .map(|(b, &p)| b * layout.seq_len + p + shift)
        .collect();
    mlm_logits_at(tape, w, &out, &rows, verbalizer)
}

/// What one optimization step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub layer_backward_count: usize,
    /// Names of the parameters that received a gradient; anything outside
    /// the prompt module shows up as `"<untracked>"`.
    pub grad_names: Vec<String>,
    pub activation_bytes: usize,
    pub tokens: usize,
}

/// Stepwise trainer. The backbone is only ever borrowed immutably.
pub struct Trainer<'a> {
    backbone: &'a Backbone,
    train: &'a EncodedSet,
    verbalizer: Vec<usize>,
    cfg: TrainConfig,
    module: PromptModule,
    params: Vec<crate::engine::Param>,
    opt: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    total_steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: &'a Backbone,
        train: &'a EncodedSet,
        verbalizer: Vec<usize>,
        spec: PromptSpec,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let module = PromptModule::init(spec, &backbone.config, cfg.seed)?;
        let params = module.to_params();
        let opt = AdamW::new(cfg.adamw(), &params);
        let (total_steps, _) = cfg.schedule(train.len());
        Ok(Trainer {
            backbone,
            train,
            verbalizer,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
            cfg,
            module,
            params,
            opt,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            total_steps,
        })
    }

    pub fn module(&self) -> &PromptModule {
        &self.module
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Next minibatch indices; a fresh shuffle starts every epoch.
    fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.train.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }

    /// One truncated-backprop step on the next minibatch.
    pub fn step(&mut self) -> Result<StepStats> {
        let idx = self.next_indices();
        let prepared = self.train.batch(&idx)?;
        self.step_on(&prepared)
    }

    /// One step on a caller-supplied batch (used by the benchmark).
    pub fn step_on(&mut self, prepared: &PreparedBatch) -> Result<StepStats> {
        let step = self.step;
        let lr = lr_schedule(step, self.total_steps, self.cfg.peak_lr, self.cfg.warmup_rate);
        let mut tape = Tape::new();
        let leaves = self.module.map(|t| tape.leaf(t));
        let logits = class_logits(&mut tape, self.backbone, &leaves, prepared, &self.verbalizer, None)?;
        let loss = tape.cross_entropy(&logits, &prepared.labels)?;
        if !loss.item().is_finite() {
            return Err(Error::Divergence { step, lr });
        }
        let grads = tape.backward(&loss)?;
        let named = leaves.named();
        let grad_names = grads
            .leaf_keys()
            .into_iter()
            .map(|id| {
                named
                    .iter()
                    .find(|(_, t)| t.node() == Some(id))
                    .map_or_else(|| "<untracked>".to_string(), |(n, _)| n.clone())
            })
            .collect();
        let grad_list: Vec<(String, Tensor)> = named
            .iter()
            .map(|(n, t)| {
                let g = grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (n.clone(), g)
            })
            .collect();
        self.opt.step(&mut self.params, &grad_list, lr)?;
        let updated: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        self.module = PromptModule::from_named(self.module.spec, &self.backbone.config, &updated)?;
        self.step += 1;
        Ok(StepStats {
            step,
            loss: loss.item(),
            lr,
            layer_backward_count: grads.layer_backward_count(),
            grad_names,
            activation_bytes: tape.activation_bytes(),
            tokens: prepared.batch.ids.len(),
        })
    }
}

/// Evaluation metrics. `score` is the selection metric: accuracy, or the
/// mean of accuracy and F1 for ACC_AND_F1 tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub score: f64,
    pub n: usize,
}

impl Metrics {
    /// Binary F1 treats label 0 (the first verbalizer entry) as positive.
    pub fn from_predictions(metric: Metric, predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if labels.is_empty() || predictions.len() != labels.len() {
            return Err(Error::Contract(format!(
                "cannot score {} predictions against {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let n = labels.len();
        let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        let accuracy = correct as f64 / n as f64;
        let f1 = match metric {
            Metric::Acc => None,
            Metric::AccAndF1 => {
                let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
                for (&p, &y) in predictions.iter().zip(labels) {
                    match (p == 0, y == 0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                let denom = 2 * tp + fp + fn_;
                Some(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
            }
        };
        let score = f1.map_or(accuracy, |f| (accuracy + f) / 2.0);
        Ok(Metrics {
            accuracy,
            f1,
            score,
            n,
        })
    }
}

/// A fixed batching of an evaluation split, optionally with the frozen
/// lower-stack states precomputed (they never change during training).
pub struct EvalSet {
    batches: Vec<(Vec<usize>, PreparedBatch, Option<Tensor>)>,
    labels: Vec<usize>,
    k: Option<usize>,
}

impl EvalSet {
    /// Batches are formed over examples sorted by length to limit padding.
    pub fn new(set: &EncodedSet, batch_size: usize) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Contract("empty evaluation split".into()));
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.sort_by_key(|&i| (set.items[i].ids.len(), i));
        let batches = order
            .chunks(batch_size.max(1))
            .map(|idx| Ok((idx.to_vec(), set.batch(idx)?, None)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            batches,
            labels: set.labels.clone(),
            k: None,
        })
    }

    /// Precomputes layer-`(k-1)` states for every batch.
    pub fn cache_lower(&mut self, backbone: &Backbone, k: usize) -> Result<()> {
        for (_, prepared, lower) in &mut self.batches {
            *lower = Some(forward_lower(&backbone.weights, &backbone.config, &prepared.batch, k)?);
        }
        self.k = Some(k);
        Ok(())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Verbalizer logits per example, in the original order.
    pub fn logits(&self, backbone: &Backbone, module: &PromptModule, verbalizer: &[usize]) -> Result<Vec<Vec<f64>>> {
        let use_cache = self.k == Some(module.spec.k);
        let mut out = vec![Vec::new(); self.labels.len()];
        let mut tape = Tape::new();
        tape.set_recording(false);
        for (idx, prepared, lower) in &self.batches {
            let lower = if use_cache { lower.as_ref() } else { None };
            let logits = class_logits(&mut tape, backbone, module, prepared, verbalizer, lower)?;
            for (r, &i) in idx.iter().enumerate() {
                out[i] = logits.row(r).to_vec();
            }
        }
        Ok(out)
    }

    pub fn predict(&self, backbone: &Backbone, module: &PromptModule, verbalizer: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .logits(backbone, module, verbalizer)?
            .iter()
            .map(|row| (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
            .collect())
    }

    pub fn evaluate(
        &self,
        backbone: &Backbone,
        module: &PromptModule,
        verbalizer: &[usize],
        metric: Metric,
    ) -> Result<Metrics> {
        let preds = self.predict(backbone, module, verbalizer)?;
        Metrics::from_predictions(metric, &preds, &self.labels)
    }
}

/// Scores `module` on `examples`.
pub fn evaluate(
    backbone: &Backbone,
    module: &PromptModule,
    vocab: &Vocab,
    task: &TaskSpec,
    examples: &[Example],
) -> Result<Metrics> {
    let set = EncodedSet::new(vocab, task, examples, backbone.config.max_seq_len, module.spec.l)?;
    let verbalizer = task.verbalize(vocab)?;
    EvalSet::new(&set, 64)?.evaluate(backbone, module, &verbalizer, task.metric)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub dev: Metrics,
}

/// Everything a training run produced, minus the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub prompt: PromptSpec,
    pub train: TrainConfig,
    pub tunable_params: usize,
    pub backbone_fingerprint: String,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_dev: Metrics,
    pub test: Option<Metrics>,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Prompt module at the best dev evaluation.
    pub best: PromptModule,
}

/// Full run: train for the configured budget, evaluate on dev every
/// `eval_every` steps (and after the last step), keep the best-dev module
/// (earliest on ties) and score it on the test split if one is present.
pub fn train(
    backbone: &Backbone,
    vocab: &Vocab,
    task: &TaskSpec,
    split: &Split,
    spec: PromptSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    task.validate()?;
    spec.validate(&backbone.config)?;
    let fingerprint = backbone.weights.fingerprint();
    let verbalizer = task.verbalize(vocab)?;
    let max_len = backbone.config.max_seq_len;
    let train_set = EncodedSet::new(vocab, task, &split.train, max_len, spec.l)?;
    let mut dev = EvalSet::new(&EncodedSet::new(vocab, task, &split.dev, max_len, spec.l)?, cfg.eval_batch_size)?;
    dev.cache_lower(backbone, spec.k)?;

    let mut trainer = Trainer::new(backbone, &train_set, verbalizer.clone(), spec, cfg.clone())?;
    let (total, cadence) = cfg.schedule(train_set.len());
    let mut losses = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut best: Option<(usize, Metrics, PromptModule)> = None;
    for _ in 0..total {
        losses.push(trainer.step()?.loss);
        let done = trainer.steps_done();
        if done % cadence == 0 || done == total {
            let m = dev.evaluate(backbone, trainer.module(), &verbalizer, task.metric)?;
            evals.push(EvalPoint { step: done, dev: m });
            if best.as_ref().map_or(true, |(_, b, _)| m.score > b.score) {
                best = Some((done, m, trainer.module().clone()));
            }
        }
    }
    let (best_step, best_dev, best_module) = best.expect("at least one evaluation");

    if backbone.weights.fingerprint() != fingerprint {
        return Err(Error::Contract("frozen backbone changed during training".into()));
    }
    let tracked = trainer.optimizer().tracked_scalars();
    let tunable = count_tunable(&spec, &backbone.config);
    if tracked != tunable {
        return Err(Error::Contract(format!(
            "optimizer tracks {tracked} scalars but the method declares {tunable}"
        )));
    }

    let test = if split.test.is_empty() {
        None
    } else {
        let set = EncodedSet::new(vocab, task, &split.test, max_len, spec.l)?;
        Some(EvalSet::new(&set, cfg.eval_batch_size)?.evaluate(backbone, &best_module, &verbalizer, task.metric)?)
    };
    Ok(TrainOutcome {
        record: RunRecord {
            task: task.name.clone(),
            prompt: spec,
            train: cfg.clone(),
            tunable_params: tunable,
            backbone_fingerprint: fingerprint,
            losses,
            evals,
            best_step,
            best_dev,
            test,
        },
        best: best_module,
    })
}
