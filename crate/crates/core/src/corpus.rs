//! Instruction datasets on disk.
//!
//! Datasets are UTF-8 JSONL, one record per line. Seed records carry only
//! `id`, `instruction`, `response` and an optional `meta` object; evolved
//! records additionally carry their [`Provenance`]. Writing is deterministic:
//! field order is fixed and maps are ordered, so identical inputs produce
//! byte-identical files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Load { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
}

impl CorpusError {
    /// 1-based line number for load errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Load { line, .. } | CorpusError::DuplicateId { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Advisory outcome of checking an evolved instruction against the
/// rewriting constraints. Flags never cause a record to be discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValidationFlag {
    SubsetSizeMismatch,
    SubsetNotInCandidates,
    TagAlreadyPresent,
    WordDeltaOutOfRange,
    FinalEqualsOriginal,
}

impl ValidationFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationFlag::SubsetSizeMismatch => "SubsetSizeMismatch",
            ValidationFlag::SubsetNotInCandidates => "SubsetNotInCandidates",
            ValidationFlag::TagAlreadyPresent => "TagAlreadyPresent",
            ValidationFlag::WordDeltaOutOfRange => "WordDeltaOutOfRange",
            ValidationFlag::FinalEqualsOriginal => "FinalEqualsOriginal",
        }
    }
}

/// Where an evolved record came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub parent_id: String,
    /// 1-based round index.
    pub round: u32,
    pub budget: usize,
    pub selected_tags: Vec<String>,
    pub candidate_tags: Vec<String>,
    pub plan: String,
    pub flags: Vec<ValidationFlag>,
    /// SHA-256 of the raw model reply.
    pub raw_digest: String,
}

/// One seed or evolved instruction. An evolved record is an
/// `InstructionRecord` whose `provenance` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub instruction: String,
    pub response: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

/// Alias for records produced by the evolver; `provenance` is always set.
pub type EvolvedRecord = InstructionRecord;

impl InstructionRecord {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        InstructionRecord {
            id: id.into(),
            instruction: instruction.into(),
            response: None,
            meta: BTreeMap::new(),
            provenance: None,
        }
    }

    pub fn is_evolved(&self) -> bool {
        self.provenance.is_some()
    }

    pub fn flags(&self) -> &[ValidationFlag] {
        self.provenance.as_ref().map(|p| p.flags.as_slice()).unwrap_or(&[])
    }
}

/// On-disk line layout. Field order here is the file's field order.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    instruction: String,
    #[serde(default)]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selected_tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidate_tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flags: Option<Vec<ValidationFlag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_digest: Option<String>,
}

impl RecordLine {
    fn from_record(r: &InstructionRecord) -> Self {
        let p = r.provenance.as_ref();
        RecordLine {
            id: Some(r.id.clone()),
            instruction: r.instruction.clone(),
            response: r.response.clone(),
            meta: r.meta.clone(),
            parent_id: p.map(|p| p.parent_id.clone()),
            round: p.map(|p| p.round),
            budget: p.map(|p| p.budget),
            selected_tags: p.map(|p| p.selected_tags.clone()),
            candidate_tags: p.map(|p| p.candidate_tags.clone()),
            plan: p.map(|p| p.plan.clone()),
            flags: p.map(|p| p.flags.clone()),
            raw_digest: p.map(|p| p.raw_digest.clone()),
        }
    }

    fn into_record(self, default_id: String) -> Result<InstructionRecord, String> {
        if self.instruction.trim().is_empty() {
            return Err("instruction is empty".into());
        }
        let provenance = match self.parent_id {
            None => None,
            Some(parent_id) => Some(Provenance {
                parent_id,
                round: self.round.ok_or("evolved record without round")?,
                budget: self.budget.ok_or("evolved record without budget")?,
                selected_tags: self.selected_tags.unwrap_or_default(),
                candidate_tags: self.candidate_tags.unwrap_or_default(),
                plan: self.plan.unwrap_or_default(),
                flags: self.flags.unwrap_or_default(),
                raw_digest: self.raw_digest.unwrap_or_default(),
            }),
        };
        Ok(InstructionRecord {
            id: self.id.unwrap_or(default_id),
            instruction: self.instruction,
            response: self.response,
            meta: self.meta,
            provenance,
        })
    }
}

/// Reads a JSONL dataset. Records missing an `id` get `<filename>:<line>`.
/// Whitespace-only lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Load {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |reason: String| CorpusError::Load {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| load_err(e.to_string()))?;
        let record = parsed
            .into_record(format!("{file_name}:{line_no}"))
            .map_err(load_err)?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_line(record: &InstructionRecord) -> String {
    serde_json::to_string(&RecordLine::from_record(record)).expect("record serialization is infallible")
}

/// Writes records as JSONL, creating parent directories as needed.
pub fn write_dataset(records: &[InstructionRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let wrap = |source: io::Error| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(wrap)?);
    for record in records {
        out.write_all(record_to_line(record).as_bytes()).map_err(wrap)?;
        out.write_all(b"\n").map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

/// Collapses runs of whitespace to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Concatenates rounds in order (optionally preceded by the seed) and drops
/// records whose whitespace-normalized instruction was already seen.
pub fn merge_rounds(
    rounds: &[Vec<InstructionRecord>],
    include_seed: bool,
    seed: &[InstructionRecord],
) -> Vec<InstructionRecord> {
    let seed_part: &[InstructionRecord] = if include_seed { seed } else { &[] };
    let mut seen = HashSet::new();
    seed_part
        .iter()
        .chain(rounds.iter().flatten())
        .filter(|r| seen.insert(normalize_whitespace(&r.instruction)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCount {
    pub round: u32,
    pub budget: Option<usize>,
    pub count: usize,
}

/// Sidecar describing a written dataset: where it came from and how it was
/// produced. Records without provenance are counted under round 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sources: Vec<String>,
    pub record_count: usize,
    pub rounds: Vec<RoundCount>,
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub candidate_size: Option<usize>,
    /// Effective run configuration, when produced by a CLI command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
}

impl DatasetManifest {
    pub fn describe(name: impl Into<String>, sources: Vec<String>, records: &[InstructionRecord]) -> Self {
        let mut by_round: BTreeMap<(u32, Option<usize>), usize> = BTreeMap::new();
        for r in records {
            let key = match &r.provenance {
                Some(p) => (p.round, Some(p.budget)),
                None => (0, None),
            };
            *by_round.entry(key).or_default() += 1;
        }
        DatasetManifest {
            name: name.into(),
            sources,
            record_count: records.len(),
            rounds: by_round
                .into_iter()
                .map(|((round, budget), count)| RoundCount { round, budget, count })
                .collect(),
            model: None,
            seed: None,
            candidate_size: None,
            config: None,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.rounds.iter().map(|r| r.count).sum::<usize>() == self.record_count
    }

    /// `<dir>/<stem>.manifest.json` for a dataset at `dataset_path`.
    pub fn path_for(dataset_path: &Path) -> PathBuf {
        let stem = dataset_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        dataset_path.with_file_name(format!("{stem}.manifest.json"))
    }

    pub fn write_beside(&self, dataset_path: &Path) -> Result<PathBuf, CorpusError> {
        let path = Self::path_for(dataset_path);
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CorpusError::Write {
            path: path.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    })
}
