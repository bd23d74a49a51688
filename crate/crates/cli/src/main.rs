use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kvdirect_cli::{Experiment, FileConfig, Format, Overrides, Preset, RunConfig};

/// Transformer inference with exact KV recomputation from residual checkpoints.
#[derive(Debug, Parser)]
#[command(name = "kvdirect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rebuild K/V from stored residuals and compare against the cache.
    Reconstruct,
    /// Greedy generation with full cache, scratch recompute and KV-Direct.
    GenerateMatch,
    /// Swap a layer's residual stream between prompts and compare outputs.
    Patch,
    /// Token match and KL of every strategy across cache budgets.
    Sweep,
    /// Spectra of the bilinear key-query maps and rank-truncated generation.
    Rank,
    /// Per-token KV versus residual memory.
    Memory,
    /// Recompute-versus-read latency and decode timings.
    Bench,
    /// Write the seeded weights to --out.
    DumpWeights,
    /// Load and validate a weight file given by --weights.
    LoadWeights,
}

impl Command {
    fn experiment(&self) -> Experiment {
        match self {
            Command::Reconstruct => Experiment::Reconstruct,
            Command::GenerateMatch => Experiment::GenerateMatch,
            Command::Patch => Experiment::Patch,
            Command::Sweep => Experiment::Sweep,
            Command::Rank => Experiment::Rank,
            Command::Memory => Experiment::Memory,
            Command::Bench => Experiment::Bench,
            Command::DumpWeights => Experiment::DumpWeights,
            Command::LoadWeights => Experiment::LoadWeights,
        }
    }
}

#[derive(Debug, clap::Args)]
struct Flags {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true, env = "KVDIRECT_CONFIG")]
    config: Option<PathBuf>,
    /// Model preset: toy or toy-mixed.
    #[arg(long, global = true, env = "KVDIRECT_PRESET")]
    preset: Option<Preset>,
    #[arg(long, global = true, env = "KVDIRECT_SEED")]
    seed: Option<u64>,
    /// Comma-separated cache budgets.
    #[arg(long, global = true, env = "KVDIRECT_BUDGETS", value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    /// Comma-separated strategies, e.g. `kvdirect,window,h2o`.
    #[arg(long, global = true, env = "KVDIRECT_STRATEGIES")]
    strategies: Option<String>,
    #[arg(long, global = true, env = "KVDIRECT_N_NEW")]
    n_new: Option<usize>,
    /// Prompt text (repeatable); supports \xNN, \n, \t and \\ escapes.
    #[arg(long = "prompt", global = true)]
    prompts: Vec<String>,
    /// File with one prompt per line.
    #[arg(long, global = true, env = "KVDIRECT_PROMPT_FILE")]
    prompt_file: Option<PathBuf>,
    #[arg(long, global = true, env = "KVDIRECT_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Report destination; stdout when absent. For dump-weights, the weight file.
    #[arg(long, global = true, env = "KVDIRECT_OUT")]
    out: Option<PathBuf>,
    /// json or csv.
    #[arg(long, global = true, env = "KVDIRECT_FORMAT")]
    format: Option<Format>,
    #[arg(long, global = true, env = "KVDIRECT_REPS")]
    reps: Option<usize>,
    #[arg(long, global = true, env = "KVDIRECT_WARMUP")]
    warmup: Option<usize>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            seed: self.seed,
            budgets: self.budgets.clone(),
            strategies: self.strategies.clone().map(|s| vec![s]),
            n_new: self.n_new,
            prompts: self.prompts.clone(),
            prompt_file: self.prompt_file.clone(),
            weights: self.weights.clone(),
            out: self.out.clone(),
            format: self.format,
            reps: self.reps,
            warmup: self.warmup,
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let file = match &cli.flags.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let experiment = cli.command.experiment();
    let run = RunConfig::resolve(experiment, &file, &cli.flags.overrides())?;
    let format = run.format;
    // dump-weights writes the weight file to --out, so its report goes to stdout.
    let out = if experiment == Experiment::DumpWeights {
        None
    } else {
        run.out.clone()
    };
    let report = kvdirect_cli::run(run)?;

    let mut body = Vec::new();
    match format {
        Format::Json => body.extend_from_slice(report.to_json()?.as_bytes()),
        Format::Csv => report.write_csv(&mut body)?,
    }
    match out {
        Some(path) => {
            std::fs::write(&path, &body).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().write_all(&body)?,
    }
    eprint!("{}", report.summary());
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
