//! Measurements on top of training runs: mutual-information probes per
//! layer, prompt-layer sweeps, the efficiency benchmark, and table output.

mod bench;
mod probe;
mod sweep;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::RunRecord;
use crate::error::{Error, Result};
use crate::prompting::Method;

pub use bench::{bench, BenchConfig, EfficiencyReport};
pub use probe::{collect_states, label_entropy, mi_probe, probe_layer, LayerProbe, LayerStates, MIProfile, ProbeConfig};
pub use sweep::{layer_sweep, mean_std, SweepRow, SweepRun, SweepTable};

/// Writes serializable rows as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of the aggregated results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub layer: usize,
    pub tunable_params: usize,
    pub runs: usize,
    /// Test score where available, best dev score otherwise.
    pub metric_mean: f64,
    pub metric_std: f64,
    pub tokens_per_ms: Option<f64>,
    pub activation_bytes: Option<usize>,
}

/// Groups records by `(method, layer)` and joins the matching benchmark
/// figures. Rows are sorted by tunable parameters, ascending.
pub fn report(records: &[RunRecord], benches: &[EfficiencyReport]) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::Contract("no run records to report".into()));
    }
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in records {
        let key = (r.prompt.method, r.prompt.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows: Vec<ReportRow> = keys
        .into_iter()
        .map(|(method, layer)| {
            let mine: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.prompt.method == method && r.prompt.k == layer)
                .collect();
            let scores: Vec<f64> = mine.iter().map(|r| r.test.map_or(r.best_dev.score, |t| t.score)).collect();
            let (metric_mean, metric_std) = mean_std(&scores);
            let b = benches.iter().find(|b| b.method == method && b.layer == layer);
            ReportRow {
                method,
                layer,
                tunable_params: mine[0].tunable_params,
                runs: mine.len(),
                metric_mean,
                metric_std,
                tokens_per_ms: b.map(|b| b.tokens_per_ms),
                activation_bytes: b.map(|b| b.activation_bytes),
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.tunable_params, r.method.as_str(), r.layer));
    Ok(rows)
}
