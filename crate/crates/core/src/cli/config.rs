//! Run configuration: TOML file plus command-line overrides.
//!
//! Every key is optional in the file; missing keys take the defaults below.
//!
//! ```toml
//! endpoint = "https://api.example.com/v1/chat/completions"
//! model = "Qwen2.5-72B-Instruct"
//! evolve_model = "Qwen2.5-7B-Instruct"   # per-stage overrides: tag_, evolve_, respond_, stats_model
//! seed = 42
//! candidate_size = 30
//! budgets = [1, 3, 5]
//! max_in_flight = 8
//! retries = 3            # transport retries per request
//! parse_retries = 2      # extra attempts when a reply does not parse
//! temperature = 0.7
//! max_tokens = 2048
//! response_temperature = 0.0
//! cache_dir = ".tagevol-cache"
//! no_cache = false
//! backoff_base_ms = 500
//! backoff_max_ms = 8000
//! timeout_secs = 120
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::evolver::{DEFAULT_CANDIDATE_SIZE, MATH_BUDGETS};
use crate::gateway::RetryPolicy;

pub const DEFAULT_MODEL: &str = "Qwen2.5-72B-Instruct";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub tag_model: Option<String>,
    pub evolve_model: Option<String>,
    pub respond_model: Option<String>,
    pub stats_model: Option<String>,
    pub seed: u64,
    pub candidate_size: usize,
    pub budgets: Vec<usize>,
    pub max_in_flight: usize,
    pub retries: u32,
    pub parse_retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: Option<f64>,
    pub response_temperature: f64,
    pub cache_dir: PathBuf,
    pub no_cache: bool,
    pub mock_script: Option<PathBuf>,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            endpoint: None,
            model: DEFAULT_MODEL.into(),
            tag_model: None,
            evolve_model: None,
            respond_model: None,
            stats_model: None,
            seed: 0,
            candidate_size: DEFAULT_CANDIDATE_SIZE,
            budgets: MATH_BUDGETS.to_vec(),
            max_in_flight: 8,
            retries: 3,
            parse_retries: 2,
            temperature: 0.7,
            max_tokens: 2048,
            top_p: None,
            response_temperature: 0.0,
            cache_dir: PathBuf::from(".tagevol-cache"),
            no_cache: false,
            mock_script: None,
            backoff_base_ms: 500,
            backoff_max_ms: 8000,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Tag,
    Evolve,
    Respond,
    Stats,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.budgets.is_empty() {
            return Err("budgets must not be empty".into());
        }
        if self.budgets.contains(&0) {
            return Err(format!("budgets must all be at least 1, got {:?}", self.budgets));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        let max_budget = self.budgets.iter().copied().max().unwrap_or(1);
        if self.candidate_size < max_budget {
            return Err(format!(
                "candidate_size {} is smaller than the largest budget {max_budget}",
                self.candidate_size
            ));
        }
        if self.temperature < 0.0 || self.response_temperature < 0.0 {
            return Err("temperatures must be non-negative".into());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn model_for(&self, stage: Stage) -> &str {
        let specific = match stage {
            Stage::Tag => &self.tag_model,
            Stage::Evolve => &self.evolve_model,
            Stage::Respond => &self.respond_model,
            Stage::Stats => &self.stats_model,
        };
        specific.as_deref().unwrap_or(&self.model)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.retries,
            base_delay: Duration::from_millis(self.backoff_base_ms),
            max_delay: Duration::from_millis(self.backoff_max_ms),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
