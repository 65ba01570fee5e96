//! Knowledge-tag pool construction.
//!
//! Each seed instruction is sent with a two-step tagging prompt: the model
//! first names the abstract aspects of the task, then assigns concrete tags
//! under every aspect as a `{"aspect": [tag, ...]}` object. Tags are
//! normalized and merged across the dataset into a [`TagPool`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InstructionRecord;
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::sha256_hex;

const TAGGING_TEMPLATE: &str = "You are a tagging system that provides useful tags for task intentions to distinguish tasks for a helpful AI assistant.
#Task {Instruction}
Please follow the steps below to assign tags to the given task.
Step 1: Consider from which aspects that tags can be assigned to cover main features of the task and provide a brief explanation. Aspects need to be summarizing, such as 'Required skill'. etc. Please summarize this task with as few aspects as possible.
Step 2: Based on the #Aspect List# obtained in Step 1, assign core tags to the given task from each aspect.

Please reply strictly in the following format:
Step 1 #Aspect List and Explanation#:
Step 2 #Aspect2Tags#:

#Aspect2Tags#
{\"xxx\":[tag1, tag2, ...], \"xxx\":[tag1, tag2, ...], ...}
where xxx means aspect you get in step 1.";

const INSTRUCTION_SLOT: &str = "{Instruction}";

pub const POOL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagParseError {
    #[error("no #Aspect2Tags# marker")]
    MissingMarker,
    #[error("aspect object unparseable: {0}")]
    BadObject(String),
    #[error("no aspect has any tags")]
    Empty,
}

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("tag normalizes to nothing: {0:?}")]
    RejectedTag(String),
    #[error("no records to tag")]
    NoRecords,
    #[error("tagging failed for all {0} records")]
    BuildFailed(usize),
    #[error("pool file {path}: {reason}")]
    PoolFormat { path: String, reason: String },
    #[error("cannot write pool file {path}: {source}")]
    PoolWrite { path: String, source: std::io::Error },
}

/// Fills the tagging prompt with `instruction`; no other text changes.
pub fn build_tagging_prompt(record: &InstructionRecord) -> Result<String, TaggerError> {
    tagging_prompt_for(&record.instruction)
}

pub fn tagging_prompt_for(instruction: &str) -> Result<String, TaggerError> {
    if instruction.trim().is_empty() {
        return Err(TaggerError::EmptyInstruction);
    }
    let (head, tail) = TAGGING_TEMPLATE
        .split_once(INSTRUCTION_SLOT)
        .expect("template has an instruction slot");
    Ok(format!("{head}{instruction}{tail}"))
}

fn is_strippable(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '.' | ',' | ';' | ':' | '!' | '?' | '\'' | '"' | '`' | '(' | ')' | '[' | ']' | '{' | '}' | '<' | '>'
                | '*' | '_' | '-' | '/' | '\\' | '|' | '~' | '…' | '“' | '”' | '‘' | '’' | '«' | '»' | '·'
                | '•' | '–' | '—' | '。' | '，' | '、'
        )
}

/// Lowercases, collapses whitespace and strips punctuation from both ends.
pub fn normalize_tag(raw: &str) -> Result<String, TaggerError> {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_matches(is_strippable);
    if trimmed.is_empty() {
        Err(TaggerError::RejectedTag(raw.to_string()))
    } else {
        Ok(trimmed.to_string())
    }
}

/// Lowercase, whitespace-collapsed text for substring checks.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parsed tagging reply. `aspects` keeps reply order; tags are raw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AspectTags {
    /// Step 1 text (aspect list and explanation), kept for audit.
    pub aspect_notes: Option<String>,
    pub aspects: Vec<(String, Vec<String>)>,
}

impl AspectTags {
    /// Aspects and tags passed through [`normalize_tag`]; rejected strings
    /// are dropped.
    pub fn normalized(&self) -> Vec<(String, Vec<String>)> {
        self.aspects
            .iter()
            .filter_map(|(aspect, tags)| {
                let aspect = normalize_tag(aspect).ok()?;
                let tags: Vec<String> = tags.iter().filter_map(|t| normalize_tag(t).ok()).collect();
                (!tags.is_empty()).then_some((aspect, tags))
            })
            .collect()
    }

    /// Every tag under every aspect, normalized and deduplicated.
    pub fn flat_tags(&self) -> BTreeSet<String> {
        self.normalized().into_iter().flat_map(|(_, tags)| tags).collect()
    }
}

fn find_all_ci(haystack: &str, needle: &str) -> Vec<usize> {
    let lower = haystack.to_ascii_lowercase();
    let needle = needle.to_ascii_lowercase();
    lower.match_indices(&needle).map(|(i, _)| i).collect()
}

/// Extracts the aspect→tags object following the last `#Aspect2Tags#`
/// marker (falling back to earlier markers when the last one has no object
/// after it).
pub fn parse_tagging_response(text: &str) -> Result<AspectTags, TagParseError> {
    let markers = find_all_ci(text, "#aspect2tags#");
    if markers.is_empty() {
        return Err(TagParseError::MissingMarker);
    }
    let mut last_err = TagParseError::BadObject("no object after marker".into());
    for &pos in markers.iter().rev() {
        let after = &text[pos + "#aspect2tags#".len()..];
        let Some(open) = after.find('{') else { continue };
        match parse_aspect_object(&after[open..]) {
            Ok(aspects) => {
                let aspects: Vec<_> = aspects.into_iter().filter(|(_, tags)| !tags.is_empty()).collect();
                if aspects.is_empty() {
                    return Err(TagParseError::Empty);
                }
                return Ok(AspectTags {
                    aspect_notes: aspect_notes(text),
                    aspects,
                });
            }
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn aspect_notes(text: &str) -> Option<String> {
    let marker = "#aspect list and explanation#";
    let start = *find_all_ci(text, marker).first()? + marker.len();
    let rest = &text[start..];
    let end = find_all_ci(rest, "#aspect2tags#").first().copied().unwrap_or(rest.len());
    let mut lines: Vec<&str> = rest[..end].lines().collect();
    // drop the "Step 2" header that precedes the marker
    while let Some(last) = lines.last() {
        let bare: String = last
            .chars()
            .filter(|c| !matches!(c, '*' | '#' | ':' | '>' | '-') && !c.is_whitespace())
            .collect();
        if bare.is_empty() || bare.eq_ignore_ascii_case("step2") {
            lines.pop();
        } else {
            break;
        }
    }
    let notes = lines.join("\n");
    let notes = notes.trim().trim_start_matches([':', '*']).trim();
    (!notes.is_empty()).then(|| notes.to_string())
}

/// Tolerant reader for `{"aspect": [tag, ...], ...}`. Keys and list items may
/// be double-quoted (JSON escapes honored), single-quoted or bare; a bare
/// scalar value counts as a one-element list.
struct ObjectReader<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> ObjectReader<'a> {
    fn bad(&self, what: &str) -> TagParseError {
        TagParseError::BadObject(format!("{what} at byte {}", self.pos))
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), TagParseError> {
        self.skip_ws();
        if self.bump() == Some(want) {
            Ok(())
        } else {
            Err(self.bad(&format!("expected '{want}'")))
        }
    }

    fn quoted(&mut self, quote: char) -> Result<String, TagParseError> {
        let start = self.pos;
        self.bump();
        if quote == '"' {
            let mut escaped = false;
            while let Some(c) = self.bump() {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == '"' {
                    return serde_json::from_str(&self.src[start..self.pos]).map_err(|_| self.bad("bad string escape"));
                }
            }
        } else {
            while let Some(c) = self.bump() {
                if c == quote {
                    return Ok(self.src[start + 1..self.pos - 1].to_string());
                }
            }
        }
        Err(self.bad("unterminated string"))
    }

    fn scalar(&mut self, stops: &[char]) -> Result<String, TagParseError> {
        self.skip_ws();
        match self.peek() {
            Some(q @ ('"' | '\'' | '“' | '‘')) => {
                let close = match q {
                    '“' => '”',
                    '‘' => '’',
                    other => other,
                };
                if close == q {
                    self.quoted(q)
                } else {
                    self.bump();
                    let start = self.pos;
                    while let Some(c) = self.bump() {
                        if c == close {
                            return Ok(self.src[start..self.pos - close.len_utf8()].to_string());
                        }
                    }
                    Err(self.bad("unterminated string"))
                }
            }
            Some(_) => {
                let start = self.pos;
                while self.peek().is_some_and(|c| !stops.contains(&c)) {
                    self.bump();
                }
                let s = self.src[start..self.pos].trim();
                if s.is_empty() {
                    Err(self.bad("empty value"))
                } else {
                    Ok(s.to_string())
                }
            }
            None => Err(self.bad("unexpected end")),
        }
    }

    fn list(&mut self) -> Result<Vec<String>, TagParseError> {
        self.expect('[')?;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(']') => {
                    self.bump();
                    return Ok(items);
                }
                Some(',') if !items.is_empty() => {
                    self.bump();
                }
                Some('[' | '{') => return Err(self.bad("nested structure in tag list")),
                Some(_) => {
                    if !items.is_empty() && !self.src[..self.pos].trim_end().ends_with(',') {
                        return Err(self.bad("missing ',' between tags"));
                    }
                    items.push(self.scalar(&[',', ']'])?);
                }
                None => return Err(self.bad("unterminated tag list")),
            }
        }
    }

    fn object(&mut self) -> Result<Vec<(String, Vec<String>)>, TagParseError> {
        self.expect('{')?;
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some('}') => {
                    self.bump();
                    return Ok(out);
                }
                Some(',') if !out.is_empty() => {
                    self.bump();
                }
                Some(_) => {
                    let key = self.scalar(&[':', '}', ','])?;
                    self.expect(':')?;
                    self.skip_ws();
                    let value = match self.peek() {
                        Some('[') => self.list()?,
                        Some('{') => return Err(self.bad("nested object")),
                        _ => vec![self.scalar(&[',', '}'])?],
                    };
                    out.push((key, value));
                }
                None => return Err(self.bad("unterminated object")),
            }
        }
    }
}

fn parse_aspect_object(src: &str) -> Result<Vec<(String, Vec<String>)>, TagParseError> {
    ObjectReader { src, pos: 0 }.object()
}

/// One normalized tag under one aspect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEntry {
    pub tag: String,
    pub aspect: String,
    pub surface_forms: BTreeSet<String>,
    pub sources: BTreeSet<String>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSource {
    pub sources: Vec<String>,
    pub record_count: usize,
}

/// Tag pool keyed by (aspect, tag).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagPool {
    entries: BTreeMap<(String, String), TagEntry>,
    pub model: String,
    pub built_from: Option<PoolSource>,
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    version: u32,
    model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    built_from: Option<PoolSource>,
    entries: Vec<TagEntry>,
}

impl TagPool {
    pub fn new(model: impl Into<String>) -> Self {
        TagPool {
            model: model.into(),
            ..Default::default()
        }
    }

    /// Records one observation of `raw_tag` under `raw_aspect` from
    /// `source`. Returns false when either side normalizes to nothing.
    pub fn observe(&mut self, raw_aspect: &str, raw_tag: &str, source: &str) -> bool {
        let (Ok(aspect), Ok(tag)) = (normalize_tag(raw_aspect), normalize_tag(raw_tag)) else {
            return false;
        };
        let entry = self
            .entries
            .entry((aspect.clone(), tag.clone()))
            .or_insert_with(|| TagEntry {
                tag,
                aspect,
                surface_forms: BTreeSet::new(),
                sources: BTreeSet::new(),
                count: 0,
            });
        entry.surface_forms.insert(raw_tag.trim().to_string());
        entry.sources.insert(source.to_string());
        entry.count += 1;
        true
    }

    pub fn entries(&self) -> impl Iterator<Item = &TagEntry> {
        self.entries.values()
    }

    pub fn get(&self, aspect: &str, tag: &str) -> Option<&TagEntry> {
        self.entries.get(&(aspect.to_string(), tag.to_string()))
    }

    /// Number of distinct (aspect, tag) entries.
    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Distinct tag strings ignoring aspect, sorted. Candidate sampling draws
    /// from this list.
    pub fn distinct_tags(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.values().map(|e| e.tag.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn distinct_tag_count(&self) -> usize {
        self.distinct_tags().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), TaggerError> {
        let file = PoolFile {
            version: POOL_FORMAT_VERSION,
            model: self.model.clone(),
            built_from: self.built_from.clone(),
            entries: self.entries.values().cloned().collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("pool serializes");
        text.push('\n');
        let wrap = |source| TaggerError::PoolWrite {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(wrap)?;
        }
        fs::write(path, text).map_err(wrap)
    }

    pub fn load(path: &Path) -> Result<Self, TaggerError> {
        let fail = |reason: String| TaggerError::PoolFormat {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let file: PoolFile = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if file.version != POOL_FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported version {} (expected {POOL_FORMAT_VERSION})",
                file.version
            )));
        }
        let mut entries = BTreeMap::new();
        for e in file.entries {
            let key = (e.aspect.clone(), e.tag.clone());
            if e.count == 0 || e.sources.is_empty() {
                return Err(fail(format!("entry {key:?} has no observations")));
            }
            if entries.insert(key.clone(), e).is_some() {
                return Err(fail(format!("duplicate entry {key:?}")));
            }
        }
        Ok(TagPool {
            entries,
            model: file.model,
            built_from: file.built_from,
        })
    }
}

/// Decoding settings for one tagging stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggingSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Extra attempts after a reply fails to parse.
    pub parse_retries: u32,
}

impl TaggingSettings {
    pub fn new(model: impl Into<String>) -> Self {
        TaggingSettings {
            model: model.into(),
            temperature: 0.7,
            max_tokens: 2048,
            parse_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggingFailure {
    pub record_id: String,
    pub error: String,
    pub attempts: u32,
    /// Digests of the replies that failed to parse.
    pub reply_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectNote {
    pub record_id: String,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BuildReport {
    pub records: usize,
    pub tagged: usize,
    pub failures: Vec<TaggingFailure>,
    pub rejected_tags: usize,
    pub distinct_tags: usize,
    pub distinct_aspect_tags: usize,
    pub aspect_notes: Vec<AspectNote>,
}

/// Tags one instruction, retrying with the same prompt when the reply does
/// not parse. Replies that fail to parse are evicted from the cache.
pub fn tag_instruction(
    record: &InstructionRecord,
    gateway: &Gateway,
    settings: &TaggingSettings,
) -> Result<AspectTags, TaggingFailure> {
    let fail = |error: String, attempts: u32, reply_digests: Vec<String>| TaggingFailure {
        record_id: record.id.clone(),
        error,
        attempts,
        reply_digests,
    };
    let prompt = build_tagging_prompt(record).map_err(|e| fail(e.to_string(), 0, vec![]))?;
    let request = ChatRequest::user(&settings.model, prompt, settings.temperature, settings.max_tokens);
    let mut digests = Vec::new();
    let mut last_error = String::new();
    for attempt in 1..=settings.parse_retries + 1 {
        match gateway.complete(&request) {
            Ok(reply) => match parse_tagging_response(&reply.content) {
                Ok(parsed) if !parsed.normalized().is_empty() => return Ok(parsed),
                Ok(_) => {
                    gateway.evict(&request);
                    digests.push(sha256_hex(&reply.content));
                    last_error = TagParseError::Empty.to_string();
                }
                Err(e) => {
                    gateway.evict(&request);
                    digests.push(sha256_hex(&reply.content));
                    last_error = e.to_string();
                }
            },
            Err(e @ (GatewayError::Auth(_) | GatewayError::InvalidRequest(_))) => {
                return Err(fail(e.to_string(), attempt, digests));
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(fail(last_error, settings.parse_retries + 1, digests))
}

/// Tags every record and merges the results into a pool. Calls run
/// concurrently under the gateway bound; merging happens afterwards in input
/// order, so the pool is deterministic for a deterministic backend.
pub fn build_tag_pool(
    records: &[InstructionRecord],
    gateway: &Gateway,
    settings: &TaggingSettings,
) -> Result<(TagPool, BuildReport), TaggerError> {
    if records.is_empty() {
        return Err(TaggerError::NoRecords);
    }
    let outcomes = gateway.for_each_bounded(records, |_, record| tag_instruction(record, gateway, settings));

    let mut pool = TagPool::new(&settings.model);
    let mut report = BuildReport {
        records: records.len(),
        ..Default::default()
    };
    for (record, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(parsed) => {
                report.tagged += 1;
                if let Some(notes) = &parsed.aspect_notes {
                    report.aspect_notes.push(AspectNote {
                        record_id: record.id.clone(),
                        notes: notes.clone(),
                    });
                }
                for (aspect, tags) in &parsed.aspects {
                    for tag in tags {
                        if !pool.observe(aspect, tag, &record.id) {
                            report.rejected_tags += 1;
                        }
                    }
                }
            }
            Err(failure) => {
                log::warn!("tagging {} failed: {}", failure.record_id, failure.error);
                report.failures.push(failure);
            }
        }
    }
    if report.tagged == 0 {
        return Err(TaggerError::BuildFailed(records.len()));
    }
    report.distinct_tags = pool.distinct_tag_count();
    report.distinct_aspect_tags = pool.entry_count();
    Ok((pool, report))
}
