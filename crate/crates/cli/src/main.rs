//! `lpt`: experiment runner for late prompt tuning on the toy backbone.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use late_prompt::prompting::Method;

const PRECEDENCE: &str = "\
Settings come from the --config JSON file (all fields optional, unknown keys
rejected); command-line flags override the matching config fields. --method
replaces the prompt section with that method's defaults before --layer is
applied. LPT_THREADS caps the number of parallel sweep runs (default 1).";

#[derive(Parser)]
#[command(name = "lpt", version, about = "Late prompt tuning on a frozen toy encoder", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run-config JSON file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Backed {
    #[command(flatten)]
    common: Common,
    /// Backbone checkpoint written by `pretrain-toy`.
    #[arg(long)]
    backbone: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy backbone with masked-language modelling.
    PretrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Seeds both the corpus and the optimizer.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tune a prompt on the frozen backbone, once per seed.
    Train {
        #[command(flatten)]
        backed: Backed,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured prompt at several layers.
    SweepLayer {
        #[command(flatten)]
        backed: Backed,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate label information in each layer's mask-position states.
    MiProbe {
        #[command(flatten)]
        backed: Backed,
        /// A per-seed run directory (record.json + best.ckpt) whose prompt
        /// is inserted while collecting states.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure training throughput and recorded activation memory.
    Bench {
        #[command(flatten)]
        backed: Backed,
        #[arg(long, value_delimiter = ',', default_value = "PT,NPG")]
        methods: Vec<Method>,
        /// Prompt layers for the late methods (PT always uses layer 1).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate every record.json and bench.json under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the prompt vectors of a trained run for the test examples.
    ExportPrompts {
        #[command(flatten)]
        backed: Backed,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        limit: usize,
    },
}

/// Error kinds that mean the invocation itself was wrong.
const USAGE_KINDS: [&str; 3] = ["usage", "config", "json"];

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = commands::kind_of(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("lpt: error[{kind}]: {msg}");
            if USAGE_KINDS.contains(&kind) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
