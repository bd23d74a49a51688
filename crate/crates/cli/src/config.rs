//! Run configuration: built-in defaults, then the TOML config file, then
//! `KVDIRECT_*` environment variables, then command-line flags.
//!
//! Config file keys (all optional):
//!
//! ```toml
//! preset = "toy"            # or "toy-mixed"
//! seed = 42
//! budgets = [4, 8, 16, 32, 64]
//! strategies = ["kvdirect", "window", "h2o", "streaming", "snapkv", "tova"]
//! n_new = 50
//! prompts = ["first prompt", "second \\x41"]
//! prompt_file = "prompts.txt"   # one prompt per line
//! weights = "model.kvdw"
//! out = "report.json"
//! format = "json"           # or "csv"
//! reps = 30
//! warmup = 5
//! bench_grid = [1, 10, 50, 100, 500]
//! seq_lens = [16, 32, 64, 128, 256]
//! ranks = [16, 8, 4]
//! bound_ranks = [1, 8, 15]
//! pairs = 1000
//!
//! [model]                   # replaces the preset entirely
//! n_layers = 4
//! d_hidden = 64
//! n_q_heads = 4
//! n_kv_heads = 2
//! d_head = 16
//! d_mlp = 128
//! vocab_size = 256
//! layer_kinds = ["global", "sliding:8", "global", "global"]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use kvdirect::cache::StrategyKind;
use kvdirect::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::prompt::parse_prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Reconstruct,
    GenerateMatch,
    Patch,
    Sweep,
    Rank,
    Memory,
    Bench,
    DumpWeights,
    LoadWeights,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Reconstruct,
        Experiment::GenerateMatch,
        Experiment::Patch,
        Experiment::Sweep,
        Experiment::Rank,
        Experiment::Memory,
        Experiment::Bench,
        Experiment::DumpWeights,
        Experiment::LoadWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Reconstruct => "reconstruct",
            Experiment::GenerateMatch => "generate-match",
            Experiment::Patch => "patch",
            Experiment::Sweep => "sweep",
            Experiment::Rank => "rank",
            Experiment::Memory => "memory",
            Experiment::Bench => "bench",
            Experiment::DumpWeights => "dump-weights",
            Experiment::LoadWeights => "load-weights",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| anyhow!("unknown experiment `{s}`; expected one of {}", names()))
    }
}

fn names() -> String {
    Experiment::ALL.map(Experiment::name).join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => bail!("unknown format `{other}`; expected json or csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Preset {
    #[default]
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "toy-mixed")]
    ToyMixed,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::ToyMixed => ModelConfig::toy_mixed(),
        }
    }
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "toy-mixed" => Ok(Preset::ToyMixed),
            other => bail!("unknown preset `{other}`; expected toy or toy-mixed"),
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<Preset>,
    pub model: Option<ModelConfig>,
    pub seed: Option<u64>,
    pub budgets: Option<Vec<usize>>,
    pub strategies: Option<Vec<String>>,
    pub n_new: Option<usize>,
    pub prompts: Option<Vec<String>>,
    pub prompt_file: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub reps: Option<usize>,
    pub warmup: Option<usize>,
    pub bench_grid: Option<Vec<usize>>,
    pub seq_lens: Option<Vec<usize>>,
    pub ranks: Option<Vec<usize>>,
    pub bound_ranks: Option<Vec<usize>>,
    pub pairs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub budgets: Option<Vec<usize>>,
    pub strategies: Option<Vec<String>>,
    pub n_new: Option<usize>,
    pub prompts: Vec<String>,
    pub prompt_file: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub reps: Option<usize>,
    pub warmup: Option<usize>,
}

/// Fully resolved settings for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    /// Strategy families for sweeps; budgets come from `budgets`.
    pub strategies: Vec<StrategyKind>,
    pub budgets: Vec<usize>,
    pub n_new: usize,
    #[serde(serialize_with = "crate::report::serialize_prompts")]
    pub prompts: Vec<Vec<u8>>,
    pub weights: Option<PathBuf>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub format: Format,
    pub reps: usize,
    pub warmup: usize,
    pub bench_grid: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub ranks: Vec<usize>,
    pub bound_ranks: Vec<usize>,
    pub pairs: usize,
}

pub const DEFAULT_STRATEGIES: [&str; 6] =
    ["kvdirect", "window", "h2o", "streaming", "snapkv", "tova"];

impl RunConfig {
    /// Built-in defaults for `experiment` on `model`.
    pub fn defaults(experiment: Experiment, model: ModelConfig) -> Self {
        let d_head = model.d_head;
        let (budgets, n_new) = match experiment {
            Experiment::GenerateMatch => (vec![0], 30),
            Experiment::Patch => (vec![], 10),
            Experiment::Bench => (vec![8], 30),
            Experiment::Memory => (vec![0, 32, 64], 0),
            Experiment::Rank => (vec![], 30),
            _ => (kvdirect::analysis::SWEEP_BUDGETS.to_vec(), 50),
        };
        Self {
            experiment,
            model,
            strategies: DEFAULT_STRATEGIES
                .iter()
                .map(|s| s.parse().expect("built-in strategy"))
                .collect(),
            budgets,
            n_new,
            prompts: crate::commands::default_prompts(experiment),
            weights: None,
            out: None,
            format: Format::Json,
            reps: 30,
            warmup: 5,
            bench_grid: kvdirect::bench::BENCH_GRID.to_vec(),
            seq_lens: vec![16, 32, 64, 128, 256],
            ranks: vec![d_head, d_head / 2, d_head / 4],
            bound_ranks: vec![1, d_head / 2, d_head - 1],
            pairs: 1000,
        }
    }

    /// Layers defaults, then `file`, then `over`.
    pub fn resolve(experiment: Experiment, file: &FileConfig, over: &Overrides) -> Result<Self> {
        let preset = over.preset.or(file.preset).unwrap_or_default();
        let mut model = match (&file.model, over.preset) {
            (Some(m), None) => m.clone(),
            _ => preset.config(),
        };
        if let Some(seed) = over.seed.or(file.seed) {
            model.seed = seed;
        }
        model.validate().map_err(|e| anyhow!("model config: {e}"))?;
        let mut run = Self::defaults(experiment, model);

        if let Some(b) = over.budgets.clone().or_else(|| file.budgets.clone()) {
            run.budgets = b;
        }
        if let Some(s) = over.strategies.as_ref().or(file.strategies.as_ref()) {
            run.strategies = parse_strategies(s)?;
        }
        if let Some(n) = over.n_new.or(file.n_new) {
            run.n_new = n;
        }
        let inline: Vec<String> = if over.prompts.is_empty() {
            file.prompts.clone().unwrap_or_default()
        } else {
            over.prompts.clone()
        };
        let prompt_file = over.prompt_file.as_ref().or(file.prompt_file.as_ref());
        if !inline.is_empty() || prompt_file.is_some() {
            let mut prompts = Vec::new();
            for p in &inline {
                prompts.push(parse_prompt(p).with_context(|| format!("prompt `{p}`"))?);
            }
            if let Some(path) = prompt_file {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                for line in text.lines().filter(|l| !l.is_empty()) {
                    prompts.push(parse_prompt(line).with_context(|| format!("prompt `{line}`"))?);
                }
            }
            run.prompts = prompts;
        }
        run.weights = over.weights.clone().or_else(|| file.weights.clone());
        run.out = over.out.clone().or_else(|| file.out.clone());
        run.format = over.format.or(file.format).unwrap_or_default();
        if let Some(r) = over.reps.or(file.reps) {
            run.reps = r;
        }
        if let Some(w) = over.warmup.or(file.warmup) {
            run.warmup = w;
        }
        if let Some(g) = &file.bench_grid {
            run.bench_grid = g.clone();
        }
        if let Some(s) = &file.seq_lens {
            run.seq_lens = s.clone();
        }
        if let Some(r) = &file.ranks {
            run.ranks = r.clone();
        }
        if let Some(r) = &file.bound_ranks {
            run.bound_ranks = r.clone();
        }
        if let Some(p) = file.pairs {
            run.pairs = p;
        }
        Ok(run)
    }
}

pub fn parse_strategies(items: &[String]) -> Result<Vec<StrategyKind>> {
    items
        .iter()
        .flat_map(|s| s.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<StrategyKind>().map_err(|e| anyhow!("{e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("serve".parse::<Experiment>().is_err());
    }

    #[test]
    fn precedence_is_file_then_overrides() {
        let file: FileConfig =
            toml::from_str("seed = 7\nn_new = 12\nbudgets = [2, 3]\npreset = \"toy-mixed\"")
                .unwrap();
        let run = RunConfig::resolve(Experiment::Sweep, &file, &Overrides::default()).unwrap();
        assert_eq!(
            (run.model.seed, run.n_new, run.budgets.clone()),
            (7, 12, vec![2, 3])
        );
        assert!(run.model.layer_kinds[1].is_sliding());
        let over = Overrides {
            seed: Some(9),
            budgets: Some(vec![5]),
            ..Default::default()
        };
        let run = RunConfig::resolve(Experiment::Sweep, &file, &over).unwrap();
        assert_eq!((run.model.seed, run.n_new, run.budgets), (9, 12, vec![5]));
    }

    #[test]
    fn unknown_config_key_names_the_field() {
        let err = toml::from_str::<FileConfig>("sed = 1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("sed"), "{err}");
    }

    #[test]
    fn invalid_model_names_the_field() {
        let file: FileConfig = toml::from_str(
            "[model]\nn_layers = 2\nd_hidden = 8\nn_q_heads = 3\nn_kv_heads = 2\nd_head = 4\nd_mlp = 8\nvocab_size = 16",
        )
        .unwrap();
        let err = RunConfig::resolve(Experiment::Sweep, &file, &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("n_q_heads"));
    }

    #[test]
    fn strategies_parse() {
        let s = parse_strategies(&["window:4,h2o".into(), "kvdirect-layer:2".into()]).unwrap();
        assert_eq!(s.len(), 3);
        assert!(parse_strategies(&["window:x".into()]).is_err());
    }
}
