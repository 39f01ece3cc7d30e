use std::path::{Path, PathBuf};

use late_prompt::analysis::{BenchConfig, ProbeConfig};
use late_prompt::encoder::ModelConfig;
use late_prompt::engine::TrainConfig;
use late_prompt::prompting::{Method, PromptSpec};
use late_prompt::tasks::toy::ToyPretrain;
use late_prompt::tasks::{load_tsv, toy_data, Example, TaskSpec};
use late_prompt::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the examples come from: a built-in toy task or an inline spec with
/// TSV files. Few-shot sampling settings live here too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub builtin: Option<String>,
    pub spec: Option<TaskSpec>,
    pub train_tsv: Option<PathBuf>,
    pub test_tsv: Option<PathBuf>,
    /// Size of the generated training pool (built-in tasks).
    pub pool_size: usize,
    /// Size of the generated held-out set, used as the test split.
    pub test_size: usize,
    pub data_seed: u64,
    pub shots: usize,
    pub dev_size: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            builtin: Some("toy-sentiment".into()),
            spec: None,
            train_tsv: None,
            test_tsv: None,
            pool_size: 5000,
            test_size: 1000,
            data_seed: 42,
            shots: 100,
            dev_size: 1000,
        }
    }
}

/// Task definition plus the full training pool and the test examples.
pub struct TaskData {
    pub spec: TaskSpec,
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSection {
    pub fn load(&self) -> Result<TaskData> {
        match (&self.builtin, &self.spec) {
            (Some(name), None) => {
                let (spec, kind) = TaskSpec::builtin(name).ok_or_else(|| {
                    Error::Config(format!(
                        "task.builtin {name:?} is not one of toy-sentiment, toy-entailment, toy-questions"
                    ))
                })?;
                let (pool, test) = toy_data(kind, self.pool_size, self.test_size, self.data_seed);
                Ok(TaskData { spec, pool, test })
            }
            (None, Some(spec)) => {
                spec.validate()?;
                let (Some(train), Some(test)) = (&self.train_tsv, &self.test_tsv) else {
                    return Err(Error::Config("task.spec needs task.train_tsv and task.test_tsv".into()));
                };
                Ok(TaskData {
                    spec: spec.clone(),
                    pool: load_tsv(train, spec)?,
                    test: load_tsv(test, spec)?,
                })
            }
            _ => Err(Error::Config("set exactly one of task.builtin and task.spec".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub probe: ProbeConfig,
    /// Examples drawn from the pool (train) and the test set (held out).
    pub probe_train: usize,
    pub probe_held_out: usize,
    pub bench: BenchConfig,
    /// Empty means every layer.
    pub sweep_layers: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            probe: ProbeConfig::default(),
            probe_train: 1000,
            probe_held_out: 1000,
            bench: BenchConfig::default(),
            sweep_layers: Vec::new(),
        }
    }
}

/// The run-config file. Every field has a default; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub pretrain: ToyPretrain,
    /// Defaults to `PromptSpec::defaults(NPG, L)` when absent.
    pub prompt: Option<PromptSpec>,
    pub task: TaskSection,
    pub train: TrainConfig,
    pub analysis: AnalysisSection,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            model: ModelConfig::toy(),
            pretrain: ToyPretrain::default(),
            prompt: None,
            task: TaskSection::default(),
            train: TrainConfig::default(),
            analysis: AnalysisSection::default(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn prompt_spec(&self) -> PromptSpec {
        self.prompt
            .unwrap_or_else(|| PromptSpec::defaults(Method::Npg, self.model.n_layers))
    }

    /// Applies `--method` and `--layer`. A new method starts from that
    /// method's defaults; the layer then overrides `k`.
    pub fn override_prompt(&mut self, method: Option<Method>, layer: Option<usize>) -> Result<()> {
        let mut spec = match method {
            Some(m) => PromptSpec::defaults(m, self.model.n_layers),
            None => self.prompt_spec(),
        };
        if let Some(k) = layer {
            spec.k = k;
        }
        spec.validate(&self.model)?;
        self.prompt = Some(spec);
        Ok(())
    }

    /// Pretty JSON with every field spelled out.
    pub fn snapshot(&self) -> String {
        let mut full = self.clone();
        full.prompt = Some(self.prompt_spec());
        serde_json::to_string_pretty(&full).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.prompt_spec().validate(&self.model)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }
}
