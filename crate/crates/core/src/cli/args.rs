use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use crate::evolver::Preset;

#[derive(Debug, Parser)]
#[command(name = "tagevol", version, about = "Evolve instruction datasets by injecting knowledge tags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a tag pool from a seed dataset.
    Tag(TagArgs),
    /// Evolve a seed dataset into one round per budget.
    Evolve(EvolveArgs),
    /// Fill in responses for a dataset.
    Respond(RespondArgs),
    /// Merge round datasets, dropping duplicate instructions.
    Merge(MergeArgs),
    /// Count n-gram overlap between a dataset and benchmarks.
    Leakage(LeakageArgs),
    /// Tag a random sample and report difficulty and diversity.
    Stats(StatsArgs),
}

/// Flags shared by every subcommand. Flags override `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Chat-completion endpoint URL (credential from TAGEVOL_API_KEY).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model id for every stage [default: Qwen2.5-72B-Instruct].
    #[arg(long)]
    pub model: Option<String>,
    /// Master seed for all randomness [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum concurrent backend requests [default: 8].
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Transport retries per request [default: 3].
    #[arg(long)]
    pub retries: Option<u32>,
    /// Extra attempts when a reply cannot be parsed [default: 2].
    #[arg(long)]
    pub parse_retries: Option<u32>,
    /// Sampling temperature for tagging and evolution [default: 0.7].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Output token limit [default: 2048].
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Response cache directory [default: .tagevol-cache].
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Disable the response cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Replay scripted responses instead of calling an endpoint.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

impl CommonArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.endpoint {
            cfg.endpoint = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.model = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.max_in_flight {
            cfg.max_in_flight = v;
        }
        if let Some(v) = self.retries {
            cfg.retries = v;
        }
        if let Some(v) = self.parse_retries {
            cfg.parse_retries = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.max_tokens {
            cfg.max_tokens = v;
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = v.clone();
        }
        if self.no_cache {
            cfg.no_cache = true;
        }
        if let Some(v) = &self.mock_script {
            cfg.mock_script = Some(v.clone());
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TagArgs {
    /// Seed dataset (JSONL).
    pub seed_path: PathBuf,
    /// Pool file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvolveArgs {
    /// Seed dataset (JSONL).
    pub seed_path: PathBuf,
    /// Tag pool written by `tag`.
    #[arg(long)]
    pub pool: PathBuf,
    /// Directory for round files, manifests and failures.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Budget schedule: math = 1,3,5; code = 3,5,7.
    #[arg(long, conflicts_with = "budgets")]
    pub preset: Option<Preset>,
    /// Explicit budgets, one round each [default: 1,3,5].
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// Tags shown to the model per request [default: 30].
    #[arg(long)]
    pub candidate_size: Option<usize>,
    /// Leave records with validation flags out of the round files.
    #[arg(long)]
    pub drop_flagged: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RespondArgs {
    /// Dataset to answer (JSONL).
    pub input: PathBuf,
    /// Output dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// Regenerate responses that already exist.
    #[arg(long)]
    pub overwrite: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MergeArgs {
    /// Round datasets, in round order.
    #[arg(required = true)]
    pub rounds: Vec<PathBuf>,
    /// Merged dataset to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Prepend this seed dataset before the rounds.
    #[arg(long)]
    pub include_seed: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LeakageArgs {
    /// Synthesized dataset to check.
    #[arg(long)]
    pub synth: PathBuf,
    /// Benchmark datasets; each is named by its file stem.
    #[arg(long = "bench", required = true)]
    pub benches: Vec<PathBuf>,
    /// Gram sizes [default: 8,13].
    #[arg(long = "n", value_delimiter = ',', default_values_t = vec![8usize, 13])]
    pub grams: Vec<usize>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// Dataset to score.
    pub input: PathBuf,
    /// Records to sample.
    #[arg(long, default_value_t = 50)]
    pub sample: usize,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}
