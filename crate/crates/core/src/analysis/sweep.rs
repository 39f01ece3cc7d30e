use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Backbone;
use crate::engine::{train, EvalPoint, TrainConfig};
use crate::error::{Error, Result};
use crate::prompting::PromptSpec;
use crate::tasks::{Split, TaskSpec, Vocab};

/// One `(layer, seed)` cell of a sweep, with its full curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub layer: usize,
    pub seed: u64,
    pub best_dev: f64,
    pub best_step: usize,
    pub test: Option<f64>,
    pub losses: Vec<f64>,
    pub dev_curve: Vec<EvalPoint>,
}

/// Per-layer summary; `std` is the sample standard deviation (0 for one run).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub runs: usize,
    pub dev_mean: f64,
    pub dev_std: f64,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains `template` with its layer replaced by each of `layers`, once per
/// seed. `split_for(seed)` supplies the data of each seed; the train seed
/// is the sweep seed. Runs are spread over at most `threads` workers and
/// are independent, so the table does not depend on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    backbone: &Backbone,
    vocab: &Vocab,
    task: &TaskSpec,
    template: PromptSpec,
    layers: &[usize],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    split_for: &(dyn Fn(u64) -> Result<Split> + Sync),
    threads: usize,
) -> Result<SweepTable> {
    let n_layers = backbone.config.n_layers;
    if layers.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one layer and one seed".into()));
    }
    if let Some(&k) = layers.iter().find(|&&k| k == 0 || k > n_layers) {
        return Err(Error::Config(format!("sweep layer {k} outside 1..={n_layers}")));
    }
    for &k in layers {
        PromptSpec { k, ..template }.validate(&backbone.config)?;
    }
    let cells: Vec<(usize, u64)> = layers.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let run_cell = |&(k, seed): &(usize, u64)| -> Result<SweepRun> {
        let split = split_for(seed)?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let out = train(backbone, vocab, task, &split, PromptSpec { k, ..template }, &cfg)?;
        let r = out.record;
        Ok(SweepRun {
            layer: k,
            seed,
            best_dev: r.best_dev.score,
            best_step: r.best_step,
            test: r.test.map(|m| m.score),
            losses: r.losses,
            dev_curve: r.evals,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?;
    let runs = pool.install(|| cells.par_iter().map(run_cell).collect::<Result<Vec<_>>>())?;

    let rows = layers
        .iter()
        .map(|&k| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.layer == k).collect();
            let dev: Vec<f64> = mine.iter().map(|r| r.best_dev).collect();
            let test: Option<Vec<f64>> = mine.iter().map(|r| r.test).collect();
            let (dev_mean, dev_std) = mean_std(&dev);
            let test_stats = test.map(|t| mean_std(&t));
            SweepRow {
                layer: k,
                runs: mine.len(),
                dev_mean,
                dev_std,
                test_mean: test_stats.map(|s| s.0),
                test_std: test_stats.map(|s| s.1),
            }
        })
        .collect();
    Ok(SweepTable { rows, runs })
}
