use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{embed, run_layers, Backbone, Layout};
use crate::engine::optim::{lr_schedule, AdamW, AdamWConfig, Param};
use crate::engine::EncodedSet;
use crate::error::{Error, Result};
use crate::prompting::PromptModule;
use crate::tensor::{Tape, Tensor};

/// Probe classifier settings: an MLP with two hidden layers of width
/// `width_mult · d`, trained with AdamW on minibatches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub width_mult: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            width_mult: 4,
            steps: 500,
            batch_size: 64,
            peak_lr: 1e-2,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub accuracy: f64,
    pub held_out_ce: f64,
    /// `H(y) − held_out_ce` in nats, clamped at 0.
    pub mi_nats: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIProfile {
    /// Empirical label entropy of the held-out split, in nats.
    pub entropy_nats: f64,
    pub layers: Vec<LayerProbe>,
}

/// Entropy (nats) of the empirical distribution of `labels`.
pub fn label_entropy(labels: &[usize]) -> f64 {
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn standardize(train: &Tensor, held: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d) = train.expect_matrix("probe features")?;
    let (_, dh) = held.expect_matrix("probe features")?;
    if dh != d {
        return Err(Error::Shape {
            op: "mi_probe",
            lhs: train.shape().to_vec(),
            rhs: held.shape().to_vec(),
        });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(train.row(i)) {
            *m += x / n as f64;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            std[j] += (train.row(i)[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let apply = |t: &Tensor| {
        let data: Vec<f64> = t
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, x)| (x - mean[j]) / std[j]).collect::<Vec<_>>())
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    Ok((apply(train)?, apply(held)?))
}

fn he_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("finite std");
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new([rows, cols], data).expect("matching length")
}

fn mlp_logits(tape: &mut Tape, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let h = tape.linear(x, &p[0], Some(&p[1]))?;
    let h = tape.relu(&h);
    let h = tape.linear(&h, &p[2], Some(&p[3]))?;
    let h = tape.relu(&h);
    tape.linear(&h, &p[4], Some(&p[5]))
}

/// Trains a fresh probe on `(train_x, train_y)` and scores it on the held-out
/// pair. Features are standardized with the training statistics.
pub fn probe_layer(
    layer: usize,
    train_x: &Tensor,
    train_y: &[usize],
    held_x: &Tensor,
    held_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LayerProbe> {
    let distinct = {
        let mut seen = vec![false; n_classes];
        for &y in train_y {
            if y >= n_classes {
                return Err(Error::Contract(format!("label {y} outside {n_classes} classes")));
            }
            seen[y] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Contract("probing needs at least 2 classes in the training labels".into()));
    }
    if train_x.rows() != train_y.len() || held_x.rows() != held_y.len() || held_y.is_empty() {
        return Err(Error::Contract("probe features and labels disagree in count".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.width_mult == 0 {
        return Err(Error::Config("probe steps, batch_size and width_mult must be positive".into()));
    }
    let (train_x, held_x) = standardize(train_x, held_x)?;
    let d = train_x.cols();
    let w = cfg.width_mult * d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (layer as u64).wrapping_mul(0x9e37_79b9));
    let mut params = vec![
        Param::new("w1", he_init(w, d, &mut rng)),
        Param::new("b1", Tensor::zeros([w])),
        Param::new("w2", he_init(w, w, &mut rng)),
        Param::new("b2", Tensor::zeros([w])),
        Param::new("w3", he_init(n_classes, w, &mut rng)),
        Param::new("b3", Tensor::zeros([n_classes])),
    ];
    let adamw = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adamw, &params);
    let n = train_y.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.steps {
        if cursor >= order.len() {
            order = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += idx.len();
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(&p.value)).collect();
        let xb = tape.gather_rows(&train_x, idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        let logits = mlp_logits(&mut tape, &leaves, &xb)?;
        let loss = tape.cross_entropy(&logits, &yb)?;
        let lr = lr_schedule(step, cfg.steps, cfg.peak_lr, 0.06);
        if !loss.item().is_finite() {
            return Err(Error::Divergence { step, lr });
        }
        let grads = tape.backward(&loss)?;
        let g: Vec<(String, Tensor)> = params
            .iter()
            .zip(&leaves)
            .map(|(p, t)| (p.name.clone(), grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))))
            .collect();
        opt.step(&mut params, &g, lr)?;
    }

    let mut tape = Tape::new();
    tape.set_recording(false);
    let values: Vec<Tensor> = params.into_iter().map(|p| p.value).collect();
    let logits = mlp_logits(&mut tape, &values, &held_x)?;
    let ce = tape.cross_entropy(&logits, held_y)?.item();
    let correct = (0..held_y.len())
        .filter(|&i| {
            let row = logits.row(i);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == held_y[i]
        })
        .count();
    let entropy = label_entropy(held_y);
    Ok(LayerProbe {
        layer,
        accuracy: correct as f64 / held_y.len() as f64,
        held_out_ce: ce,
        mi_nats: (entropy - ce).max(0.0),
    })
}

/// Per-layer features of one split, as produced by [`collect_states`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    /// `(layer, n × d states)` pairs.
    pub layers: Vec<(usize, Tensor)>,
    pub labels: Vec<usize>,
}

/// Probes every layer present in both splits.
pub fn mi_probe(train: &LayerStates, held: &LayerStates, n_classes: usize, cfg: &ProbeConfig) -> Result<MIProfile> {
    if train.layers.len() != held.layers.len() {
        return Err(Error::Contract("train and held-out states cover different layers".into()));
    }
    let layers = train
        .layers
        .iter()
        .zip(&held.layers)
        .map(|((la, tx), (lb, hx))| {
            if la != lb {
                return Err(Error::Contract(format!("layer mismatch: {la} vs {lb}")));
            }
            probe_layer(*la, tx, &train.labels, hx, &held.labels, n_classes, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MIProfile {
        entropy_nats: label_entropy(&held.labels),
        layers,
    })
}

/// Hidden states at the `[MASK]` position after each layer `1..=L`, with
/// the prompt (if any) inserted before layer `k`. Nothing is recorded.
pub fn collect_states(
    backbone: &Backbone,
    module: Option<&PromptModule>,
    set: &EncodedSet,
    batch_size: usize,
) -> Result<LayerStates> {
    let (cfg, w) = (&backbone.config, &backbone.weights);
    let n_layers = cfg.n_layers;
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut tape = Tape::new();
    tape.set_recording(false);
    for chunk in idx.chunks(batch_size.max(1)) {
        let prepared = set.batch(chunk)?;
        let mut x = embed(&mut tape, w, cfg, &prepared.batch)?;
        let mut layout = Layout::from(&prepared.batch);
        let mut shift = 0;
        for j in 1..=n_layers {
            if let Some(m) = module.filter(|m| m.spec.k == j) {
                (x, layout, shift) = m.prompted_input(&mut tape, &x, &layout)?;
            }
            x = run_layers(&mut tape, w, cfg, x, &layout, j, j + 1)?;
            for (b, &p) in prepared.mask_pos.iter().enumerate() {
                per_layer[j - 1].extend_from_slice(x.row(b * layout.seq_len + p + shift));
            }
        }
    }
    let d = cfg.d_model;
    let layers = per_layer
        .into_iter()
        .enumerate()
        .map(|(j, data)| Ok((j + 1, Tensor::new([data.len() / d, d], data)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerStates {
        layers,
        labels: set.labels.clone(),
    })
}
