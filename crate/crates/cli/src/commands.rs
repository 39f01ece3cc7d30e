use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use late_prompt::analysis::{self, bench, collect_states, layer_sweep, mean_std, mi_probe, EfficiencyReport};
use late_prompt::checkpoint;
use late_prompt::encoder::{forward_lower, Backbone, Layout};
use late_prompt::engine::{train, EncodedSet, RunRecord, TrainConfig};
use late_prompt::prompting::{default_prompt_layer, Method, PromptModule, PromptSpec};
use late_prompt::tasks::{few_shot_split, toy, Vocab};
use late_prompt::tensor::Tape;
use serde::Serialize;

use crate::config::{RunConfigFile, TaskData};
use crate::{Backed, Command, Common};

/// A failure that is the caller's fault rather than the library's.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    msg: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError {
        kind: "usage",
        msg: msg.into(),
    }
    .into()
}

/// The error prefix: the first typed cause in the chain decides.
pub fn kind_of(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return c.kind;
        }
        if let Some(l) = cause.downcast_ref::<late_prompt::Error>() {
            return l.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PretrainToy { common, out, seed } => pretrain_toy(&common, &out, seed),
        Command::Train {
            backed,
            method,
            layer,
            shots,
            seeds,
            out,
        } => run_train(&backed, method, layer, shots, seeds, out),
        Command::SweepLayer {
            backed,
            layers,
            seeds,
            shots,
            out,
        } => sweep(&backed, layers, seeds, shots, out),
        Command::MiProbe { backed, run, out } => probe(&backed, run.as_deref(), out),
        Command::Bench {
            backed,
            methods,
            layers,
            out,
        } => run_bench(&backed, &methods, layers, out),
        Command::Report { dir, out } => report(&dir, out.as_deref()),
        Command::ExportPrompts {
            backed,
            run,
            out,
            limit,
        } => export_prompts(&backed, &run, &out, limit),
    }
}

fn load_config(common: &Common) -> Result<RunConfigFile> {
    Ok(RunConfigFile::load(common.config.as_deref())?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Config with the backbone's model section, plus the backbone and vocab.
fn open(backed: &Backed) -> Result<(RunConfigFile, Backbone, Vocab)> {
    let mut cfg = load_config(&backed.common)?;
    let bb = checkpoint::load_backbone(&backed.backbone)
        .with_context(|| format!("loading backbone {}", backed.backbone.display()))?;
    let vocab = toy::toy_vocab();
    if bb.config.vocab_size != vocab.len() {
        return Err(usage(format!(
            "backbone vocabulary has {} entries, the toy vocabulary {}",
            bb.config.vocab_size,
            vocab.len()
        )));
    }
    cfg.model = bb.config.clone();
    Ok((cfg, bb, vocab))
}

fn threads() -> Result<usize> {
    match std::env::var("LPT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("LPT_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn pretrain_toy(common: &Common, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = seed {
        cfg.pretrain = cfg.pretrain.with_seed(s);
    }
    cfg.model.validate()?;
    let (bb, stats) = toy::pretrain_backbone(&cfg.model, &cfg.pretrain)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save_backbone(out, &bb)?;
    write_json(&out.with_extension("stats.json"), &stats)?;
    write(&out.with_extension("config.json"), cfg.snapshot() + "\n")?;
    println!(
        "wrote {}: held-out MLM loss {:.4} -> {:.4}, accuracy {:.3} -> {:.3}, fingerprint {}",
        out.display(),
        stats.initial.loss,
        stats.trained.loss,
        stats.initial.accuracy,
        stats.trained.accuracy,
        &bb.weights.fingerprint()[..16]
    );
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    method: Method,
    layer: usize,
    prompt_len: usize,
    tunable_params: usize,
    seeds: usize,
    dev_mean: f64,
    dev_std: f64,
    test_mean: Option<f64>,
    test_std: Option<f64>,
}

fn summarize(records: &[RunRecord]) -> SummaryRow {
    let dev: Vec<f64> = records.iter().map(|r| r.best_dev.score).collect();
    let test: Option<Vec<f64>> = records.iter().map(|r| r.test.map(|t| t.score)).collect();
    let (dev_mean, dev_std) = mean_std(&dev);
    let test = test.map(|t| mean_std(&t));
    let r = &records[0];
    SummaryRow {
        method: r.prompt.method,
        layer: r.prompt.k,
        prompt_len: r.prompt.l,
        tunable_params: r.tunable_params,
        seeds: records.len(),
        dev_mean,
        dev_std,
        test_mean: test.map(|t| t.0),
        test_std: test.map(|t| t.1),
    }
}

fn apply_overrides(
    cfg: &mut RunConfigFile,
    method: Option<Method>,
    layer: Option<usize>,
    shots: Option<usize>,
    seeds: Option<Vec<u64>>,
) -> Result<()> {
    if method.is_some() || layer.is_some() {
        cfg.override_prompt(method, layer).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(n) = shots {
        cfg.task.shots = n;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.validate()?;
    Ok(())
}

fn run_train(
    backed: &Backed,
    method: Option<Method>,
    layer: Option<usize>,
    shots: Option<usize>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
) -> Result<()> {
    if method == Some(Method::PT) && layer.is_some_and(|k| k != 1) {
        return Err(usage(format!("--method PT prompts layer 1 only; got --layer {}", layer.unwrap_or(1))));
    }
    let (mut cfg, bb, vocab) = open(backed)?;
    apply_overrides(&mut cfg, method, layer, shots, seeds)?;
    let data = cfg.task.load()?;
    let spec = cfg.prompt_spec();
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out)?;
    write(&out.join("run.json"), cfg.snapshot() + "\n")?;

    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let split = few_shot_split(&data.pool, &data.test, cfg.task.shots, cfg.task.dev_size, seed)?;
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let outcome = train(&bb, &vocab, &data.spec, &split, spec, &tc)?;
        let dir = out.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let single = RunConfigFile {
            seeds: vec![seed],
            ..cfg.clone()
        };
        write(&dir.join("run.json"), single.snapshot() + "\n")?;
        write_json(&dir.join("record.json"), &outcome.record)?;
        checkpoint::save_prompt(&dir.join("best.ckpt"), &outcome.best)?;
        let r = &outcome.record;
        println!(
            "seed {seed}: {} k={} best dev {:.4} at step {}{}",
            spec.method,
            spec.k,
            r.best_dev.score,
            r.best_step,
            r.test.map_or(String::new(), |t| format!(", test {:.4}", t.score))
        );
        records.push(outcome.record);
    }
    let row = summarize(&records);
    analysis::write_csv(&out.join("summary.csv"), std::slice::from_ref(&row))?;
    println!(
        "{} k={}: dev {:.4} ± {:.4}{} over {} seeds; {} tunable parameters",
        row.method,
        row.layer,
        row.dev_mean,
        row.dev_std,
        match (row.test_mean, row.test_std) {
            (Some(m), Some(s)) => format!(", test {m:.4} ± {s:.4}"),
            _ => String::new(),
        },
        row.seeds,
        row.tunable_params
    );
    Ok(())
}

fn sweep(
    backed: &Backed,
    layers: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    shots: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut cfg, bb, vocab) = open(backed)?;
    apply_overrides(&mut cfg, None, None, shots, seeds)?;
    let layers = layers
        .or_else(|| Some(cfg.analysis.sweep_layers.clone()).filter(|l| !l.is_empty()))
        .unwrap_or_else(|| (1..=bb.config.n_layers).collect());
    let data = cfg.task.load()?;
    let (shots, dev_size) = (cfg.task.shots, cfg.task.dev_size);
    let split_for = |seed: u64| few_shot_split(&data.pool, &data.test, shots, dev_size, seed);
    let table = layer_sweep(
        &bb,
        &vocab,
        &data.spec,
        cfg.prompt_spec(),
        &layers,
        &cfg.seeds,
        &cfg.train,
        &split_for,
        threads()?,
    )?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("sweep"));
    create_dir(&out)?;
    write(&out.join("run.json"), cfg.snapshot() + "\n")?;
    analysis::write_csv(&out.join("sweep.csv"), &table.rows)?;
    write_json(&out.join("sweep_runs.json"), &table.runs)?;
    for r in &table.rows {
        println!("layer {:>2}: dev {:.4} ± {:.4} ({} runs)", r.layer, r.dev_mean, r.dev_std, r.runs);
    }
    Ok(())
}

/// A trained prompt from a per-seed run directory.
fn load_run(dir: &Path, bb: &Backbone) -> Result<(RunRecord, PromptModule)> {
    let path = dir.join("record.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let record: RunRecord =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if record.backbone_fingerprint != bb.weights.fingerprint() {
        return Err(usage(format!("{} was trained on a different backbone", dir.display())));
    }
    let module = checkpoint::load_prompt(&dir.join("best.ckpt"), record.prompt, &bb.config)?;
    Ok((record, module))
}

fn head<T: Clone>(xs: &[T], n: usize) -> Vec<T> {
    xs[..n.min(xs.len())].to_vec()
}

fn probe(backed: &Backed, run: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let (cfg, bb, vocab) = open(backed)?;
    let module = run.map(|dir| load_run(dir, &bb)).transpose()?.map(|(_, m)| m);
    let TaskData { spec, pool, test } = cfg.task.load()?;
    let l = module.as_ref().map_or(0, |m| m.spec.l);
    let max_len = bb.config.max_seq_len;
    let train_set = EncodedSet::new(&vocab, &spec, &head(&pool, cfg.analysis.probe_train), max_len, l)?;
    let held_set = EncodedSet::new(&vocab, &spec, &head(&test, cfg.analysis.probe_held_out), max_len, l)?;
    let train_states = collect_states(&bb, module.as_ref(), &train_set, 64)?;
    let held_states = collect_states(&bb, module.as_ref(), &held_set, 64)?;
    let profile = mi_probe(&train_states, &held_states, spec.num_labels(), &cfg.analysis.probe)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("mi"));
    create_dir(&out)?;
    analysis::write_csv(&out.join("mi.csv"), &profile.layers)?;
    write_json(&out.join("mi.json"), &profile)?;
    println!("H(y) = {:.4} nats", profile.entropy_nats);
    for p in &profile.layers {
        println!("layer {:>2}: accuracy {:.3}, MI {:.4} nats", p.layer, p.accuracy, p.mi_nats);
    }
    Ok(())
}

fn run_bench(backed: &Backed, methods: &[Method], layers: Option<Vec<usize>>, out: Option<PathBuf>) -> Result<()> {
    let (cfg, bb, _) = open(backed)?;
    let n_layers = bb.config.n_layers;
    let layers = layers.unwrap_or_else(|| vec![default_prompt_layer(n_layers)]);
    let mut specs = Vec::new();
    for &m in methods {
        if m == Method::PT {
            specs.push(PromptSpec::defaults(m, n_layers));
        } else {
            specs.extend(layers.iter().map(|&k| PromptSpec {
                k,
                ..PromptSpec::defaults(m, n_layers)
            }));
        }
    }
    let mut reports: Vec<EfficiencyReport> = Vec::new();
    for spec in specs {
        let r = bench(&bb, spec, &cfg.analysis.bench)?;
        println!(
            "{} k={:>2}: {:.3} tokens/ms, {} activation bytes, {} layers backpropagated",
            r.method, r.layer, r.tokens_per_ms, r.activation_bytes, r.backward_layer_count
        );
        reports.push(r);
    }
    let out = out.unwrap_or_else(|| cfg.output_dir.join("bench"));
    create_dir(&out)?;
    analysis::write_csv(&out.join("bench.csv"), &reports)?;
    write_json(&out.join("bench.json"), &reports)?;
    Ok(())
}

fn report(dir: &Path, out: Option<&Path>) -> Result<()> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let mut records = Vec::new();
    let mut benches = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("scanning {}", dir.display()))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy();
        if name != "record.json" && name != "bench.json" {
            continue;
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if name == "record.json" {
            records.push(serde_json::from_str::<RunRecord>(&text).with_context(|| format!("parsing {}", path.display()))?);
        } else {
            benches.extend(
                serde_json::from_str::<Vec<EfficiencyReport>>(&text)
                    .with_context(|| format!("parsing {}", path.display()))?,
            );
        }
    }
    if records.is_empty() {
        return Err(CliError {
            kind: "input",
            msg: format!("no record.json found under {}", dir.display()),
        }
        .into());
    }
    let rows = analysis::report(&records, &benches)?;
    match out {
        Some(path) => analysis::write_csv(path, &rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportedPrompt {
    index: usize,
    label: usize,
    prompt: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PromptExport {
    method: Method,
    layer: usize,
    prompt_len: usize,
    d_model: usize,
    examples: Vec<ExportedPrompt>,
}

fn export_prompts(backed: &Backed, run: &Path, out: &Path, limit: usize) -> Result<()> {
    let (cfg, bb, vocab) = open(backed)?;
    let (_, module) = load_run(run, &bb)?;
    let TaskData { spec, test, .. } = cfg.task.load()?;
    let set = EncodedSet::new(&vocab, &spec, &head(&test, limit), bb.config.max_seq_len, module.spec.l)?;
    let (l, d) = (module.spec.l, bb.config.d_model);
    let mut examples = Vec::with_capacity(set.len());
    let mut tape = Tape::new();
    tape.set_recording(false);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(64) {
        let prepared = set.batch(chunk)?;
        let hidden = forward_lower(&bb.weights, &bb.config, &prepared.batch, module.spec.k)?;
        let prompts = module.prompts(&mut tape, &hidden, &Layout::from(&prepared.batch))?;
        for (b, &i) in chunk.iter().enumerate() {
            examples.push(ExportedPrompt {
                index: i,
                label: set.labels[i],
                prompt: (0..l).map(|r| prompts.row(b * l + r).to_vec()).collect(),
            });
        }
    }
    let n = examples.len();
    write_json(
        out,
        &PromptExport {
            method: module.spec.method,
            layer: module.spec.k,
            prompt_len: l,
            d_model: d,
            examples,
        },
    )?;
    println!("wrote {n} prompts of {l}×{d} to {}", out.display());
    Ok(())
}
