//! Tag-driven instruction evolution.
//!
//! The pipeline builds a pool of fine-grained knowledge tags from a seed
//! instruction dataset, then asks a chat-completion model to rewrite each
//! seed instruction by injecting a budget-sized subset of a sampled
//! candidate batch. Supporting stages generate responses, merge rounds,
//! detect benchmark contamination by n-gram overlap and compute tag-based
//! difficulty and diversity statistics.
//!
//! Stages:
//!
//! - [`corpus`]: JSONL datasets, provenance, dedup and manifests
//! - [`gateway`]: chat-completion access (HTTP or scripted mock) with retries,
//!   a concurrency bound and an on-disk response cache
//! - [`tagger`]: two-step aspect/tag prompting and tag pool construction
//! - [`evolver`]: candidate sampling, budgeted rewriting and validation
//! - [`responder`]: response generation for instructions
//! - [`leakage`]: n-gram contamination counts
//! - [`metrics`]: difficulty and diversity of tagged samples
//! - [`cli`]: configuration and subcommands

pub mod cli;
pub mod corpus;
pub mod evolver;
pub mod exec;
pub mod gateway;
pub mod leakage;
pub mod metrics;
pub mod responder;
pub mod tagger;

pub use corpus::{DatasetManifest, InstructionRecord, Provenance, ValidationFlag};
pub use evolver::{EvolutionJob, EvolutionResult};
pub use gateway::{ChatRequest, ChatResponse, Gateway};
pub use tagger::{TagEntry, TagPool};

/// Lowercase hex SHA-256 of `data`.
pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(data.as_ref()))
}
