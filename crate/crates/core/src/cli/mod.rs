//! Subcommands and their exit-code contract.
//!
//! Exit codes: 0 success, 2 input error, 3 backend error, 4 precondition
//! error. Failures are reported on stderr as a single JSON object.

pub mod args;
pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{self, write_json, DatasetManifest, InstructionRecord};
use crate::evolver::{self, EvolveSettings};
use crate::gateway::{Backend, Gateway, HttpBackend, MockBackend, ResponseCache, API_KEY_ENV};
use crate::leakage;
use crate::metrics::{self, MetricsError};
use crate::responder::{self, ResponseSettings};
use crate::tagger::{self, PoolSource, TagPool, TaggerError, TaggingSettings};

pub use args::{Cli, Command, CommonArgs};
pub use config::{RunConfig, Stage};

/// Generator stream reserved for sampling in `stats`; evolution rounds use
/// streams 1, 2, ...
const STATS_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Backend,
    Precondition,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Backend => 3,
            ErrorKind::Precondition => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Input => "input",
            ErrorKind::Backend => "backend",
            ErrorKind::Precondition => "precondition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl fmt::Display) -> Self {
        CliError {
            kind: ErrorKind::Input,
            message: message.to_string(),
        }
    }

    pub fn backend(message: impl fmt::Display) -> Self {
        CliError {
            kind: ErrorKind::Backend,
            message: message.to_string(),
        }
    }

    pub fn precondition(message: impl fmt::Display) -> Self {
        CliError {
            kind: ErrorKind::Precondition,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn to_json(&self) -> String {
        json!({"error": self.message, "kind": self.kind.name(), "exit_code": self.exit_code()}).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<corpus::CorpusError> for CliError {
    fn from(err: corpus::CorpusError) -> Self {
        CliError::input(err)
    }
}

/// Resolves the effective configuration: defaults, then `--config`, then
/// flags.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(CliError::input)?,
        None => RunConfig::default(),
    };
    common.apply(&mut cfg);
    Ok(cfg)
}

/// Executes subcommands against a configuration. A backend can be injected
/// for in-process use; otherwise it comes from `mock_script` or `endpoint`.
pub struct Runner {
    pub config: RunConfig,
    backend: Option<Arc<dyn Backend>>,
}

impl Runner {
    pub fn new(config: RunConfig) -> Self {
        Runner { config, backend: None }
    }

    pub fn with_backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.backend = Some(backend);
        self
    }

    fn backend(&self) -> Result<Arc<dyn Backend>, CliError> {
        if let Some(b) = &self.backend {
            return Ok(b.clone());
        }
        if let Some(script) = &self.config.mock_script {
            let mock = MockBackend::load_script(script).map_err(CliError::input)?;
            return Ok(Arc::new(mock));
        }
        match &self.config.endpoint {
            Some(endpoint) => {
                let key = std::env::var(API_KEY_ENV).ok();
                if key.is_none() {
                    log::warn!("{API_KEY_ENV} is not set; sending requests without a credential");
                }
                Ok(Arc::new(HttpBackend::new(
                    endpoint.clone(),
                    key,
                    Duration::from_secs(self.config.timeout_secs),
                )))
            }
            None => Err(CliError::input("no backend configured: pass --endpoint or --mock-script")),
        }
    }

    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let mut gw = Gateway::new(self.backend()?)
            .with_retry_policy(self.config.retry_policy())
            .with_max_in_flight(self.config.max_in_flight);
        if !self.config.no_cache {
            let cache = ResponseCache::open(&self.config.cache_dir)
                .map_err(|e| CliError::input(format!("cache dir {}: {e}", self.config.cache_dir.display())))?;
            gw = gw.with_cache(cache);
        }
        Ok(gw)
    }

    fn tagging_settings(&self, stage: Stage) -> TaggingSettings {
        TaggingSettings {
            model: self.config.model_for(stage).to_string(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            parse_retries: self.config.parse_retries,
        }
    }

    fn manifest(&self, name: &str, sources: Vec<String>, records: &[InstructionRecord], stage: Stage) -> DatasetManifest {
        let mut m = DatasetManifest::describe(name, sources, records);
        m.model = Some(self.config.model_for(stage).to_string());
        m.seed = Some(self.config.seed);
        m.candidate_size = Some(self.config.candidate_size);
        m.config = Some(self.config.to_json());
        m
    }

    pub fn tag(&self, seed_path: &Path, out: &Path) -> Result<String, CliError> {
        self.config.validate().map_err(CliError::input)?;
        let records = corpus::load_dataset(seed_path)?;
        let gateway = self.gateway()?;
        let (mut pool, report) = match tagger::build_tag_pool(&records, &gateway, &self.tagging_settings(Stage::Tag)) {
            Ok(done) => done,
            Err(TaggerError::NoRecords) => return Err(CliError::precondition("seed dataset is empty")),
            Err(err) => return Err(CliError::backend(err)),
        };
        pool.built_from = Some(PoolSource {
            sources: vec![seed_path.display().to_string()],
            record_count: records.len(),
        });
        pool.save(out).map_err(CliError::input)?;
        write_json(&sibling(out, "report"), &report)?;
        Ok(format!(
            "pool: {} distinct tags, {} aspect/tag entries from {}/{} records ({} failed)",
            report.distinct_tags,
            report.distinct_aspect_tags,
            report.tagged,
            report.records,
            report.failures.len()
        ))
    }

    pub fn evolve(&self, seed_path: &Path, pool_path: &Path, out_dir: &Path, drop_flagged: bool) -> Result<String, CliError> {
        self.config.validate().map_err(CliError::input)?;
        let seed = corpus::load_dataset(seed_path)?;
        let pool = TagPool::load(pool_path).map_err(CliError::input)?;
        let max_budget = self.config.budgets.iter().copied().max().unwrap_or(1);
        if pool.distinct_tag_count() < max_budget {
            return Err(CliError::precondition(format!(
                "pool has {} distinct tags but the largest budget is {max_budget}",
                pool.distinct_tag_count()
            )));
        }
        if seed.is_empty() {
            return Err(CliError::precondition("seed dataset is empty"));
        }
        let gateway = self.gateway()?;
        let settings = EvolveSettings {
            model: self.config.model_for(Stage::Evolve).to_string(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            candidate_size: self.config.candidate_size,
            parse_retries: self.config.parse_retries,
        };
        let rounds = evolver::evolve_rounds(&seed, &self.config.budgets, &pool, &gateway, self.config.seed, &settings)
            .map_err(CliError::precondition)?;

        let mut failures = Vec::new();
        let mut lines = Vec::new();
        let mut empty_rounds = Vec::new();
        for round in rounds {
            let total = round.records.len();
            let records: Vec<InstructionRecord> = if drop_flagged {
                round.records.into_iter().filter(|r| r.flags().is_empty()).collect()
            } else {
                round.records
            };
            let path = out_dir.join(format!("round{}_budget{}.jsonl", round.round, round.budget));
            corpus::write_dataset(&records, &path)?;
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            let sources = vec![seed_path.display().to_string(), pool_path.display().to_string()];
            self.manifest(&name, sources, &records, Stage::Evolve).write_beside(&path)?;
            lines.push(format!(
                "round {} (budget {}): {} written, {} dropped as flagged, {} failed",
                round.round,
                round.budget,
                records.len(),
                total - records.len(),
                round.failures.len()
            ));
            if total == 0 {
                empty_rounds.push(round.round);
            }
            failures.extend(round.failures);
        }
        write_json(&out_dir.join("failures.json"), &failures)?;
        if !empty_rounds.is_empty() {
            return Err(CliError::backend(format!(
                "every record failed in round(s) {empty_rounds:?}; see {}",
                out_dir.join("failures.json").display()
            )));
        }
        Ok(lines.join("\n"))
    }

    pub fn respond(&self, input: &Path, out: &Path, overwrite: bool) -> Result<String, CliError> {
        self.config.validate().map_err(CliError::input)?;
        let records = corpus::load_dataset(input)?;
        let gateway = self.gateway()?;
        let settings = ResponseSettings {
            model: self.config.model_for(Stage::Respond).to_string(),
            temperature: self.config.response_temperature,
            max_tokens: self.config.max_tokens,
            overwrite,
        };
        let (answered, report) = responder::generate_responses(&records, &gateway, &settings);
        corpus::write_dataset(&answered, out)?;
        let name = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        self.manifest(&name, vec![input.display().to_string()], &answered, Stage::Respond)
            .write_beside(out)?;
        write_json(&sibling(out, "failures"), &report.failures)?;
        if report.generated == 0 && !report.failures.is_empty() {
            return Err(CliError::backend(format!("all {} responses failed", report.failures.len())));
        }
        Ok(format!(
            "responses: {} generated, {} kept, {} failed",
            report.generated,
            report.skipped,
            report.failures.len()
        ))
    }

    pub fn merge(&self, rounds: &[PathBuf], out: &Path, include_seed: Option<&Path>) -> Result<String, CliError> {
        let datasets = rounds.iter().map(corpus::load_dataset).collect::<Result<Vec<_>, _>>()?;
        let seed = match include_seed {
            Some(p) => corpus::load_dataset(p)?,
            None => Vec::new(),
        };
        let merged = corpus::merge_rounds(&datasets, include_seed.is_some(), &seed);
        corpus::write_dataset(&merged, out)?;
        let mut sources: Vec<String> = include_seed.iter().map(|p| p.display().to_string()).collect();
        sources.extend(rounds.iter().map(|p| p.display().to_string()));
        let name = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let mut manifest = DatasetManifest::describe(name, sources, &merged);
        manifest.config = Some(self.config.to_json());
        manifest.write_beside(out)?;
        let input_total: usize = datasets.iter().map(Vec::len).sum::<usize>() + seed.len();
        Ok(format!("merged {} records ({} duplicates removed)", merged.len(), input_total - merged.len()))
    }

    pub fn leakage(&self, synth: &Path, benches: &[PathBuf], grams: &[usize], out: Option<&Path>) -> Result<String, CliError> {
        if grams.contains(&0) {
            return Err(CliError::input("gram size must be at least 1"));
        }
        let synth_records = corpus::load_dataset(synth)?;
        let mut reports = Vec::new();
        for bench in benches {
            let name = bench.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let bench_records = corpus::load_dataset(bench)?;
            for &n in grams {
                reports.push(leakage::count_matches(&name, &synth_records, &bench_records, n));
            }
        }
        if let Some(out) = out {
            write_json(out, &reports)?;
        }
        Ok(serde_json::to_string_pretty(&reports).expect("reports serialize"))
    }

    pub fn stats(&self, input: &Path, sample: usize, out: Option<&Path>) -> Result<String, CliError> {
        self.config.validate().map_err(CliError::input)?;
        let records = corpus::load_dataset(input)?;
        let gateway = self.gateway()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(STATS_STREAM);
        let report = metrics::evaluate_dataset(&records, &gateway, sample, &mut rng, &self.tagging_settings(Stage::Stats))
            .map_err(|e| match e {
                MetricsError::MetricsFailed(_) => CliError::backend(e),
                other => CliError::precondition(other),
            })?;
        if let Some(out) = out {
            write_json(out, &report)?;
        }
        Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
    }
}

/// `<dir>/<stem>.<suffix>.json` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

/// Runs a parsed command line and returns the text to print on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    use args::Command::*;
    match cli.command {
        Tag(a) => Runner::new(resolve_config(&a.common)?).tag(&a.seed_path, &a.out),
        Evolve(a) => {
            let mut cfg = resolve_config(&a.common)?;
            if let Some(preset) = a.preset {
                cfg.budgets = preset.budgets();
            }
            if let Some(budgets) = &a.budgets {
                cfg.budgets = budgets.clone();
            }
            if let Some(size) = a.candidate_size {
                cfg.candidate_size = size;
            }
            Runner::new(cfg).evolve(&a.seed_path, &a.pool, &a.out_dir, a.drop_flagged)
        }
        Respond(a) => Runner::new(resolve_config(&a.common)?).respond(&a.input, &a.out, a.overwrite),
        Merge(a) => Runner::new(resolve_config(&a.common)?).merge(&a.rounds, &a.out, a.include_seed.as_deref()),
        Leakage(a) => Runner::new(resolve_config(&a.common)?).leakage(&a.synth, &a.benches, &a.grams, a.out.as_deref()),
        Stats(a) => Runner::new(resolve_config(&a.common)?).stats(&a.input, a.sample, a.out.as_deref()),
    }
}
