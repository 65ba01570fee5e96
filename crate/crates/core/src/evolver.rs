//! Budgeted tag injection.
//!
//! For every seed instruction a fresh batch of candidate tags is drawn from
//! the pool, and the model is asked to pick `budget` of them, plan the
//! rewrite, rewrite, and finally clean up the result. The four-step reply is
//! parsed, checked against the rewriting constraints and stored with full
//! provenance. Rounds apply different budgets to the same seed dataset.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::corpus::{InstructionRecord, Provenance, ValidationFlag};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::sha256_hex;
use crate::tagger::{normalize_tag, normalize_text, TagPool};

const EVOLUTION_TEMPLATE: &str = "You are an Instruction Rewriter that rewrites the given #Instruction# into a more challenging version based on the given tags.

Here is the #Instruction#: {Instruction}

Here is the #Tag List#:
{TagList}


Please follow the steps below to rewrite the given #Instruction# into a more intricate and demanding version.

Step 1: Carefully read the #Instruction# and #Tag List#. Select a subset from the #Tag List# that will allow the #Instruction# to evolve and become more complex. The chosen subset should provide richer, more nuanced information that enhances the original prompt, ultimately increasing its difficulty and quality. Aim to challenge advanced AI assistants like ChatGPT and GPT-4. The subset should contain {Budget} tags and must exclude any tags already present in the #Instruction#.

Step 2: Develop a comprehensive plan based on the #Tag subset# generated in Step 1 to make the #Instruction# more challenging. This plan should focus on seamlessly integrating multiple tags from the #Tag subset# into the original #Instruction#.

Step 3: Execute the plan step by step and provide the #Rewritten Instruction#. The #Rewritten Instruction# may only add between 10 and {WordLimit} words to the original #Instruction#.

Step 4: Thoroughly review the #Rewritten Instruction# to identify any inconsistencies. Ensure that the #Rewritten Instruction# is solely a more challenging version of the original #Instruction#.Provide only the #Final Rewritten Instruction# without any additional explanation.

Please reply strictly in the following format:
Step 1 #Tag subset#:
Step 2 #Plan#:
Step 3 #Rewritten Instruction#:
Step 4 #Finally Rewritten Instruction#:";

/// Minimum number of words a rewrite must add.
pub const MIN_ADDED_WORDS: i64 = 10;
/// Words allowed per injected tag.
pub const WORDS_PER_TAG: i64 = 20;

pub const DEFAULT_CANDIDATE_SIZE: usize = 30;

/// Budget schedules used for the math and code domains.
pub const MATH_BUDGETS: [usize; 3] = [1, 3, 5];
pub const CODE_BUDGETS: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Math,
    Code,
}

impl Preset {
    pub fn budgets(self) -> Vec<usize> {
        match self {
            Preset::Math => MATH_BUDGETS.to_vec(),
            Preset::Code => CODE_BUDGETS.to_vec(),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "math" => Ok(Preset::Math),
            "code" => Ok(Preset::Code),
            other => Err(format!("unknown preset {other:?} (expected math or code)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("reply is missing step {0}")]
    MissingStep(u8),
    #[error("tag subset unparseable: {0}")]
    BadSubset(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvolveError {
    #[error("tag pool is empty")]
    EmptyPool,
    #[error("invalid evolution job: {0}")]
    BadJob(String),
    #[error("record {record_id} failed after {attempts} attempts: {reason}")]
    RecordFailed {
        record_id: String,
        attempts: u32,
        reason: String,
        transcript_digests: Vec<String>,
    },
}

/// One application of the rewriting step: the seed, its budget and the
/// candidate batch shown to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionJob {
    pub record: InstructionRecord,
    pub budget: usize,
    pub candidates: Vec<String>,
    /// Seed of the generator that drew `candidates`.
    pub rng_seed: u64,
}

impl EvolutionJob {
    pub fn validate(&self) -> Result<(), EvolveError> {
        check_job(self.budget, &self.candidates)
    }
}

fn check_job(budget: usize, candidates: &[String]) -> Result<(), EvolveError> {
    if budget == 0 {
        return Err(EvolveError::BadJob("budget must be at least 1".into()));
    }
    if candidates.len() < budget {
        return Err(EvolveError::BadJob(format!(
            "{} candidates cannot cover budget {budget}",
            candidates.len()
        )));
    }
    let distinct: BTreeSet<&String> = candidates.iter().collect();
    if distinct.len() != candidates.len() {
        return Err(EvolveError::BadJob("candidate tags are not distinct".into()));
    }
    Ok(())
}

/// The four sections of a rewriting reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedEvolution {
    /// Normalized, deduplicated, in reply order.
    pub subset: Vec<String>,
    pub plan: String,
    pub rewritten: String,
    pub final_instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionResult {
    pub evolved: String,
    pub selected_tags: Vec<String>,
    pub plan: String,
    pub rewritten: String,
    pub flags: Vec<ValidationFlag>,
    pub raw_digest: String,
}

/// Candidate batch plus whether the requested size had to be clamped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    pub tags: Vec<String>,
    pub clamped: bool,
}

/// Uniform sample without replacement over the pool's distinct tags. When
/// `size` exceeds the pool, the whole pool is returned shuffled.
pub fn sample_candidates<R: Rng + ?Sized>(pool: &TagPool, size: usize, rng: &mut R) -> Result<Candidates, EvolveError> {
    sample_from(&pool.distinct_tags(), size, rng)
}

/// [`sample_candidates`] over an explicit tag list.
pub fn sample_from<R: Rng + ?Sized>(tags: &[String], size: usize, rng: &mut R) -> Result<Candidates, EvolveError> {
    if tags.is_empty() {
        return Err(EvolveError::EmptyPool);
    }
    if size == 0 {
        return Err(EvolveError::BadJob("candidate size must be at least 1".into()));
    }
    let clamped = size > tags.len();
    if clamped {
        log::warn!("candidate size {size} exceeds pool of {} tags; using the whole pool", tags.len());
    }
    let amount = size.min(tags.len());
    let picked = index::sample(rng, tags.len(), amount);
    Ok(Candidates {
        tags: picked.into_iter().map(|i| tags[i].clone()).collect(),
        clamped,
    })
}

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{(Instruction|TagList|Budget|WordLimit)\}").unwrap());

/// Fills the rewriting prompt. The tag list is rendered as a JSON array and
/// the word limit as the product `20 * budget`.
pub fn build_evolution_prompt(record: &InstructionRecord, budget: usize, candidates: &[String]) -> Result<String, EvolveError> {
    check_job(budget, candidates)?;
    let tag_list = serde_json::to_string(candidates).expect("tags serialize");
    let word_limit = (budget as i64 * WORDS_PER_TAG).to_string();
    let budget_text = budget.to_string();
    Ok(SLOT
        .replace_all(EVOLUTION_TEMPLATE, |caps: &regex::Captures| match &caps[1] {
            "Instruction" => record.instruction.clone(),
            "TagList" => tag_list.clone(),
            "Budget" => budget_text.clone(),
            _ => word_limit.clone(),
        })
        .into_owned())
}

static STEP_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)#\s*(tag\s+subset|plan|rewritten\s+instruction|final(?:ly)?\s+rewritten\s+instruction)\s*#").unwrap()
});

static HEADER_PREFIX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s*#>\-_]*(step\s*\d+\s*[:.)\-]?)?[\s*_]*$").unwrap());

static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+").unwrap());

static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"'([^']*)'|"([^"]*)"|“([^”]*)”|‘([^’]*)’"#).unwrap());

#[derive(Clone, Copy)]
struct Marker {
    step: u8,
    start: usize,
    end: usize,
}

fn step_of(label: &str) -> u8 {
    let l = label.to_ascii_lowercase();
    if l.starts_with("tag") {
        1
    } else if l.starts_with("plan") {
        2
    } else if l.starts_with("rewritten") {
        3
    } else {
        4
    }
}

/// Where the section preceding a marker ends: the start of the marker's line
/// when that line only holds a step header, otherwise the marker itself.
fn section_end(text: &str, marker_start: usize) -> usize {
    let line_start = text[..marker_start].rfind('\n').map_or(0, |i| i + 1);
    if HEADER_PREFIX.is_match(&text[line_start..marker_start]) {
        line_start
    } else {
        marker_start
    }
}

fn clean_section(body: &str) -> String {
    let body = body.trim();
    let body = body.trim_start_matches(|c: char| c == ':' || c == '*' || c.is_whitespace());
    let body = body.trim_end_matches(|c: char| c == '*' || c.is_whitespace());
    body.to_string()
}

/// Splits a reply into its four sections. Markers are matched
/// case-insensitively; "Final" and "Finally" are both accepted for step 4.
pub fn parse_evolution_response(text: &str) -> Result<ParsedEvolution, ParseError> {
    let markers: Vec<Marker> = STEP_MARKER
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            Marker {
                step: step_of(&c[1]),
                start: m.start(),
                end: m.end(),
            }
        })
        .collect();

    let mut chosen: Vec<Marker> = Vec::with_capacity(4);
    let mut from = 0;
    for step in 1..=3u8 {
        let m = markers
            .iter()
            .find(|m| m.step == step && m.start >= from)
            .copied()
            .ok_or(ParseError::MissingStep(step))?;
        from = m.end;
        chosen.push(m);
    }
    let last = markers
        .iter()
        .rev()
        .find(|m| m.step == 4 && m.start >= from)
        .copied()
        .ok_or(ParseError::MissingStep(4))?;
    chosen.push(last);

    let mut sections = Vec::with_capacity(4);
    for (i, m) in chosen.iter().enumerate() {
        let end = chosen.get(i + 1).map_or(text.len(), |next| section_end(text, next.start));
        sections.push(clean_section(&text[m.end..end.max(m.end)]));
    }
    let final_instruction = sections.pop().unwrap();
    let rewritten = sections.pop().unwrap();
    let plan = sections.pop().unwrap();
    let subset = parse_subset(&sections.pop().unwrap())?;
    if final_instruction.is_empty() {
        return Err(ParseError::MissingStep(4));
    }
    Ok(ParsedEvolution {
        subset,
        plan,
        rewritten,
        final_instruction,
    })
}

fn strip_quotes(s: &str) -> &str {
    s.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`' | '“' | '”' | '‘' | '’'))
}

/// Reads a tag subset written as a JSON array, a bracketed list of quoted
/// strings, a bulleted list or a comma-separated line.
pub fn parse_subset(body: &str) -> Result<Vec<String>, ParseError> {
    let body = body.trim();
    let raw: Vec<String> = if let Some(open) = body.find('[') {
        let close = body[open..]
            .find(']')
            .map(|i| open + i)
            .ok_or_else(|| ParseError::BadSubset("unclosed '['".into()))?;
        let bracketed = &body[open..=close];
        let inner = &body[open + 1..close];
        if let Ok(list) = serde_json::from_str::<Vec<String>>(bracketed) {
            list
        } else if QUOTED.is_match(inner) {
            QUOTED
                .captures_iter(inner)
                .map(|c| c.iter().skip(1).flatten().next().map_or("", |m| m.as_str()).to_string())
                .collect()
        } else {
            inner.split(',').map(|s| strip_quotes(s).to_string()).collect()
        }
    } else {
        let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() > 1 && lines.iter().all(|l| BULLET.is_match(l)) {
            lines.iter().map(|l| strip_quotes(&BULLET.replace(l, "")).to_string()).collect()
        } else {
            let first = lines.first().copied().unwrap_or("");
            first.split(',').map(|s| strip_quotes(s).to_string()).collect()
        }
    };

    let mut seen = BTreeSet::new();
    let mut subset = Vec::new();
    for item in raw {
        let tag = normalize_tag(&item).map_err(|_| ParseError::BadSubset(format!("unusable tag {item:?}")))?;
        if seen.insert(tag.clone()) {
            subset.push(tag);
        }
    }
    if subset.is_empty() {
        return Err(ParseError::BadSubset("no tags".into()));
    }
    Ok(subset)
}

/// Whitespace-separated word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Words added by the rewrite (may be negative).
pub fn word_delta(final_instruction: &str, original: &str) -> i64 {
    word_count(final_instruction) as i64 - word_count(original) as i64
}

/// Checks a parsed reply against the rewriting constraints. Flags are
/// advisory and returned in a fixed order.
pub fn validate_result(parsed: &ParsedEvolution, budget: usize, candidates: &[String], original: &str) -> Vec<ValidationFlag> {
    let mut flags = Vec::new();
    if parsed.subset.len() != budget {
        flags.push(ValidationFlag::SubsetSizeMismatch);
    }
    let cand: BTreeSet<&str> = candidates.iter().map(String::as_str).collect();
    if parsed.subset.iter().any(|t| !cand.contains(t.as_str())) {
        flags.push(ValidationFlag::SubsetNotInCandidates);
    }
    let original_norm = normalize_text(original);
    if parsed.subset.iter().any(|t| original_norm.contains(t.as_str())) {
        flags.push(ValidationFlag::TagAlreadyPresent);
    }
    let delta = word_delta(&parsed.final_instruction, original);
    if delta < MIN_ADDED_WORDS || delta > WORDS_PER_TAG * budget as i64 {
        flags.push(ValidationFlag::WordDeltaOutOfRange);
    }
    if normalize_text(&parsed.final_instruction) == original_norm {
        flags.push(ValidationFlag::FinalEqualsOriginal);
    }
    flags
}

/// Parses and validates one rewriting reply.
pub fn interpret_reply(original: &str, budget: usize, candidates: &[String], reply: &str) -> Result<EvolutionResult, ParseError> {
    let parsed = parse_evolution_response(reply)?;
    let flags = validate_result(&parsed, budget, candidates, original);
    Ok(EvolutionResult {
        evolved: parsed.final_instruction,
        selected_tags: parsed.subset,
        plan: parsed.plan,
        rewritten: parsed.rewritten,
        flags,
        raw_digest: sha256_hex(reply),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub candidate_size: usize,
    /// Extra attempts, each with a fresh candidate batch, after a reply
    /// fails to parse or the call fails.
    pub parse_retries: u32,
}

impl EvolveSettings {
    pub fn new(model: impl Into<String>) -> Self {
        EvolveSettings {
            model: model.into(),
            temperature: 0.7,
            max_tokens: 2048,
            candidate_size: DEFAULT_CANDIDATE_SIZE,
            parse_retries: 2,
        }
    }
}

/// Id of the record evolved from `parent_id` in `round`.
pub fn evolved_id(parent_id: &str, round: u32) -> String {
    format!("{parent_id}@r{round}")
}

/// Runs the rewriting step on one record.
pub fn evolve_record<R: Rng + ?Sized>(
    record: &InstructionRecord,
    budget: usize,
    round: u32,
    pool_tags: &[String],
    gateway: &Gateway,
    rng: &mut R,
    settings: &EvolveSettings,
) -> Result<InstructionRecord, EvolveError> {
    let failed = |attempts: u32, reason: String, transcript_digests: Vec<String>| EvolveError::RecordFailed {
        record_id: record.id.clone(),
        attempts,
        reason,
        transcript_digests,
    };
    if budget == 0 {
        return Err(failed(0, "budget must be at least 1".into(), vec![]));
    }
    if pool_tags.len() < budget {
        return Err(failed(
            0,
            format!("pool has {} distinct tags, budget is {budget}", pool_tags.len()),
            vec![],
        ));
    }

    let mut digests = Vec::new();
    let mut last_error = String::new();
    let attempts = settings.parse_retries + 1;
    for attempt in 1..=attempts {
        let cand = sample_from(pool_tags, settings.candidate_size.max(budget), rng)
            .map_err(|e| failed(attempt, e.to_string(), digests.clone()))?
            .tags;
        let prompt = build_evolution_prompt(record, budget, &cand).map_err(|e| failed(attempt, e.to_string(), digests.clone()))?;
        let request = ChatRequest::user(&settings.model, prompt, settings.temperature, settings.max_tokens);
        let reply = match gateway.complete(&request) {
            Ok(reply) => reply,
            Err(e @ (GatewayError::Auth(_) | GatewayError::InvalidRequest(_))) => {
                return Err(failed(attempt, e.to_string(), digests));
            }
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        match interpret_reply(&record.instruction, budget, &cand, &reply.content) {
            Ok(result) => {
                return Ok(InstructionRecord {
                    id: evolved_id(&record.id, round),
                    instruction: result.evolved,
                    response: None,
                    meta: record.meta.clone(),
                    provenance: Some(Provenance {
                        parent_id: record.id.clone(),
                        round,
                        budget,
                        selected_tags: result.selected_tags,
                        candidate_tags: cand,
                        plan: result.plan,
                        flags: result.flags,
                        raw_digest: result.raw_digest,
                    }),
                });
            }
            Err(e) => {
                gateway.evict(&request);
                digests.push(sha256_hex(&reply.content));
                last_error = e.to_string();
            }
        }
    }
    Err(failed(attempts, last_error, digests))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionFailure {
    pub round: u32,
    pub budget: usize,
    pub record_id: String,
    pub attempts: u32,
    pub error: String,
    pub transcript_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub round: u32,
    pub budget: usize,
    pub records: Vec<InstructionRecord>,
    pub failures: Vec<EvolutionFailure>,
}

/// Per-record generator seeds for one round, drawn in record order from a
/// stream of the master seed dedicated to that round.
pub fn record_seeds(master_seed: u64, round: u32, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(round as u64);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Evolves every seed record once per budget. Every round starts from the
/// seed dataset; records that fail are reported and skipped.
pub fn evolve_rounds(
    seed: &[InstructionRecord],
    budgets: &[usize],
    pool: &TagPool,
    gateway: &Gateway,
    master_seed: u64,
    settings: &EvolveSettings,
) -> Result<Vec<RoundOutput>, EvolveError> {
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(EvolveError::BadJob(format!("budgets must be nonempty and positive, got {budgets:?}")));
    }
    let pool_tags = pool.distinct_tags();
    if pool_tags.is_empty() {
        return Err(EvolveError::EmptyPool);
    }
    let mut rounds = Vec::with_capacity(budgets.len());
    for (i, &budget) in budgets.iter().enumerate() {
        let round = i as u32 + 1;
        let seeds = record_seeds(master_seed, round, seed.len());
        let outcomes = gateway.for_each_bounded(seed, |idx, record| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[idx]);
            evolve_record(record, budget, round, &pool_tags, gateway, &mut rng, settings)
        });
        let mut out = RoundOutput {
            round,
            budget,
            records: Vec::new(),
            failures: Vec::new(),
        };
        for outcome in outcomes {
            match outcome {
                Ok(record) => out.records.push(record),
                Err(EvolveError::RecordFailed {
                    record_id,
                    attempts,
                    reason,
                    transcript_digests,
                }) => out.failures.push(EvolutionFailure {
                    round,
                    budget,
                    record_id,
                    attempts,
                    error: reason,
                    transcript_digests,
                }),
                Err(other) => return Err(other),
            }
        }
        log::info!(
            "round {round} (budget {budget}): {} evolved, {} failed",
            out.records.len(),
            out.failures.len()
        );
        rounds.push(out);
    }
    Ok(rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use proptest::prelude::*;

    fn tags(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn pool_of(names: &[&str]) -> TagPool {
        let mut pool = TagPool::new("m");
        for n in names {
            pool.observe("skill", n, "src");
        }
        pool
    }

    const REVERSE: &str = "Reverse the string given in the input";

    fn reply(subset: &str, final_text: &str) -> String {
        format!(
            "Step 1 #Tag subset#: {subset}\nStep 2 #Plan#: Integrate the tags.\nStep 3 #Rewritten Instruction#: {final_text}\nStep 4 #Finally Rewritten Instruction#: {final_text}"
        )
    }

    #[test]
    fn samples_whole_pool_as_permutation() {
        let pool = pool_of(&["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_candidates(&pool, 3, &mut rng).unwrap();
        let mut sorted = c.tags.clone();
        sorted.sort();
        assert_eq!(sorted, tags(&["a", "b", "c"]));
        assert!(!c.clamped);
        let c = sample_candidates(&pool, 30, &mut rng).unwrap();
        assert_eq!(c.tags.len(), 3);
        assert!(c.clamped);
        assert_eq!(sample_candidates(&TagPool::new("m"), 3, &mut rng), Err(EvolveError::EmptyPool));
    }

    #[test]
    fn sampling_is_reproducible() {
        let pool = pool_of(&["a", "b", "c", "d", "e", "f", "g"]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_candidates(&pool, 3, &mut rng).unwrap().tags).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
        assert_eq!(record_seeds(42, 2, 5), record_seeds(42, 2, 5));
        assert_ne!(record_seeds(42, 1, 5), record_seeds(42, 2, 5));
    }

    #[test]
    fn prompt_renders_budget_and_word_limit() {
        let rec = InstructionRecord::new("r", REVERSE);
        let cand: Vec<String> = (1..=20).map(|i| format!("t{i}")).collect();
        let prompt = build_evolution_prompt(&rec, 3, &cand).unwrap();
        assert!(prompt.starts_with("You are an Instruction Rewriter"));
        assert!(prompt.contains("must exclude any tags already present"));
        assert!(prompt.contains("contain 3 tags"));
        assert!(prompt.contains("between 10 and 60 words"));
        assert!(prompt.contains(&format!("Here is the #Instruction#: {REVERSE}\n")));
        assert!(prompt.contains("[\"t1\",\"t2\","));

        let one = build_evolution_prompt(&rec, 1, &cand).unwrap();
        assert!(one.contains("between 10 and 20 words"));
        assert!(matches!(build_evolution_prompt(&rec, 3, &tags(&["a", "b"])), Err(EvolveError::BadJob(_))));
        assert!(matches!(build_evolution_prompt(&rec, 2, &tags(&["a", "a"])), Err(EvolveError::BadJob(_))));
    }

    #[test]
    fn prompt_does_not_expand_slots_inside_the_instruction() {
        let rec = InstructionRecord::new("r", "Print {Budget} and {TagList} literally");
        let prompt = build_evolution_prompt(&rec, 1, &tags(&["a"])).unwrap();
        assert!(prompt.contains("Print {Budget} and {TagList} literally"));
    }

    #[test]
    fn parses_subset_formats() {
        assert_eq!(parse_subset("[\"a b\", \"C\"]").unwrap(), tags(&["a b", "c"]));
        assert_eq!(parse_subset("['form processing', 'letters and numbers']").unwrap(), tags(&["form processing", "letters and numbers"]));
        assert_eq!(parse_subset("loops, recursion , Big O").unwrap(), tags(&["loops", "recursion", "big o"]));
        assert_eq!(parse_subset("- loops\n- recursion").unwrap(), tags(&["loops", "recursion"]));
        assert_eq!(parse_subset("[loops, recursion]").unwrap(), tags(&["loops", "recursion"]));
        assert!(matches!(parse_subset(""), Err(ParseError::BadSubset(_))));
        assert!(matches!(parse_subset("[\"...\"]"), Err(ParseError::BadSubset(_))));
        assert!(matches!(parse_subset("['a'"), Err(ParseError::BadSubset(_))));
    }

    #[test]
    fn parses_markdown_reply() {
        let text = "**Step 1 #Tag Subset#:**\n['loops']\n\n**Step 2 #Plan#:**\nAdd a loop.\n\n**Step 3 #Rewritten Instruction#:**\nDo it in a loop.\n\n**Step 4 #Final Rewritten Instruction#:**\nDo it in a loop twice.";
        let p = parse_evolution_response(text).unwrap();
        assert_eq!(p.subset, tags(&["loops"]));
        assert_eq!(p.plan, "Add a loop.");
        assert_eq!(p.rewritten, "Do it in a loop.");
        assert_eq!(p.final_instruction, "Do it in a loop twice.");
    }

    #[test]
    fn plan_mentioning_markers_does_not_confuse_sections() {
        let text = "Step 1 #Tag subset#: [\"a\"]\nStep 2 #Plan#: Use the #Tag subset# tag a.\nStep 3 #Rewritten Instruction#: X\nStep 4 #Finally Rewritten Instruction#: Y";
        let p = parse_evolution_response(text).unwrap();
        assert_eq!(p.plan, "Use the #Tag subset# tag a.");
        assert_eq!(p.final_instruction, "Y");
    }

    #[test]
    fn missing_steps_are_reported() {
        let full = reply("['a']", "final");
        let without4 = full.split("Step 4").next().unwrap().to_string();
        assert_eq!(parse_evolution_response(&without4), Err(ParseError::MissingStep(4)));
        assert_eq!(parse_evolution_response("#Plan# x"), Err(ParseError::MissingStep(1)));
        let empty_final = format!("{without4}Step 4 #Finally Rewritten Instruction#:   ");
        assert_eq!(parse_evolution_response(&empty_final), Err(ParseError::MissingStep(4)));
    }

    fn parsed(subset: &[&str], final_text: &str) -> ParsedEvolution {
        ParsedEvolution {
            subset: tags(subset),
            plan: String::new(),
            rewritten: final_text.into(),
            final_instruction: final_text.into(),
        }
    }

    fn padded(words: usize) -> String {
        let extra: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
        format!("{REVERSE} {}", extra.join(" "))
    }

    #[test]
    fn clean_result_has_no_flags() {
        let cand = tags(&["loops", "recursion", "unicode", "palindromes"]);
        let p = parsed(&["loops", "recursion", "unicode"], &padded(15));
        assert!(validate_result(&p, 3, &cand, REVERSE).is_empty());
    }

    #[test]
    fn each_constraint_has_its_flag() {
        let cand = tags(&["loops", "recursion", "unicode", "string"]);
        let check = |p: ParsedEvolution, budget| validate_result(&p, budget, &cand, REVERSE);
        assert_eq!(check(parsed(&["loops", "recursion"], &padded(15)), 3), vec![ValidationFlag::SubsetSizeMismatch]);
        assert_eq!(check(parsed(&["loops", "recursion", "heaps"], &padded(15)), 3), vec![ValidationFlag::SubsetNotInCandidates]);
        assert_eq!(check(parsed(&["loops", "recursion", "string"], &padded(15)), 3), vec![ValidationFlag::TagAlreadyPresent]);
        assert_eq!(check(parsed(&["loops"], &padded(21)), 1), vec![ValidationFlag::WordDeltaOutOfRange]);
        assert_eq!(check(parsed(&["loops"], &padded(9)), 1), vec![ValidationFlag::WordDeltaOutOfRange]);
        assert!(check(parsed(&["loops"], &padded(10)), 1).is_empty());
        assert!(check(parsed(&["loops"], &padded(20)), 1).is_empty());
        assert_eq!(
            check(parsed(&["loops"], "reverse the  STRING given in the input"), 1),
            vec![ValidationFlag::WordDeltaOutOfRange, ValidationFlag::FinalEqualsOriginal]
        );
    }

    #[test]
    fn evolves_one_record_with_provenance() {
        let rec = InstructionRecord::new("s1", REVERSE);
        let pool = pool_of(&["basic math calculations"]);
        let mock = MockBackend::new();
        let prompt = build_evolution_prompt(&rec, 1, &tags(&["basic math calculations"])).unwrap();
        let final_text = "Reverse the string given in the input and multiply its length by 2.";
        mock.register_prompt(&prompt, reply("['basic math calculations']", final_text));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = evolve_record(&rec, 1, 1, &pool.distinct_tags(), &Gateway::new(mock), &mut rng, &EvolveSettings::new("m")).unwrap();
        let p = out.provenance.unwrap();
        assert_eq!(out.id, "s1@r1");
        assert_eq!(out.instruction, final_text);
        assert_eq!(p.selected_tags, tags(&["basic math calculations"]));
        assert_eq!(p.flags, vec![ValidationFlag::WordDeltaOutOfRange]);
        assert_eq!(p.parent_id, "s1");
        assert_eq!(p.raw_digest.len(), 64);
    }

    #[test]
    fn small_pool_and_malformed_replies_fail_the_record() {
        let rec = InstructionRecord::new("s1", REVERSE);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let settings = EvolveSettings::new("m");
        let gw = Gateway::new(MockBackend::new());
        match evolve_record(&rec, 5, 1, &tags(&["a", "b"]), &gw, &mut rng, &settings) {
            Err(EvolveError::RecordFailed { attempts: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }

        struct Garbage;
        impl crate::gateway::Backend for Garbage {
            fn call(&self, _: &ChatRequest) -> Result<crate::ChatResponse, crate::gateway::BackendError> {
                Ok(crate::ChatResponse::text("Step 1 #Tag subset#: ['a']\nI got bored."))
            }
        }
        match evolve_record(&rec, 1, 1, &tags(&["a", "b"]), &Gateway::new(Garbage), &mut rng, &settings) {
            Err(EvolveError::RecordFailed { attempts: 3, transcript_digests, .. }) => assert_eq!(transcript_digests.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn presets_match_schedules() {
        assert_eq!("math".parse::<Preset>().unwrap().budgets(), vec![1, 3, 5]);
        assert_eq!("code".parse::<Preset>().unwrap().budgets(), vec![3, 5, 7]);
        assert!("poetry".parse::<Preset>().is_err());
    }

    proptest! {
        #[test]
        fn sample_is_distinct_subset(n in 1usize..40, size in 1usize..50, seed: u64) {
            let all: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_from(&all, size, &mut rng).unwrap();
            let set: BTreeSet<_> = c.tags.iter().collect();
            prop_assert_eq!(set.len(), c.tags.len());
            prop_assert_eq!(c.tags.len(), size.min(n));
            prop_assert_eq!(c.clamped, size > n);
            prop_assert!(c.tags.iter().all(|t| all.contains(t)));
        }

        /// Dropping a violation from an otherwise clean result removes
        /// exactly that flag.
        #[test]
        fn flags_track_violations(budget in 1usize..6, extra in 10i64..=20, bad_size: bool, bad_member: bool, present: bool) {
            let cand: Vec<String> = (0..10).map(|i| format!("tag{i}")).collect();
            let original = "reverse the string tag9 quickly";
            let mut subset: Vec<String> = cand[..budget].to_vec();
            if present { subset[0] = "tag9".into(); }
            if bad_member { subset.push("outsider".into()); }
            if bad_size { subset.push("tag8".into()); }
            let words: Vec<String> = (0..extra).map(|i| format!("w{i}")).collect();
            let p = ParsedEvolution {
                subset,
                plan: String::new(),
                rewritten: String::new(),
                final_instruction: format!("{original} {}", words.join(" ")),
            };
            let flags = validate_result(&p, budget, &cand, original);
            prop_assert_eq!(flags.contains(&ValidationFlag::SubsetSizeMismatch), bad_size || bad_member);
            prop_assert_eq!(flags.contains(&ValidationFlag::SubsetNotInCandidates), bad_member);
            prop_assert_eq!(flags.contains(&ValidationFlag::TagAlreadyPresent), present);
            prop_assert!(!flags.contains(&ValidationFlag::WordDeltaOutOfRange));
            prop_assert!(!flags.contains(&ValidationFlag::FinalEqualsOriginal));
        }
    }
}
