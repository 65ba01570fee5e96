//! N-gram contamination detection.
//!
//! Texts are lowercased and split on whitespace; an n-gram is a window of n
//! consecutive tokens joined by single spaces. A benchmark item is matched
//! when any of its n-grams occurs in any synthesized instruction.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::InstructionRecord;
use crate::exec::{self, Execution};

/// Example matches kept per report.
pub const SAMPLE_LIMIT: usize = 5;

/// Lowercased whitespace tokens, windowed. Texts shorter than `n` (and
/// `n == 0`) give the empty set.
pub fn extract_ngrams(text: &str, n: usize) -> HashSet<String> {
    if n == 0 {
        return HashSet::new();
    }
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered.split_whitespace().collect();
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMatch {
    pub gram: String,
    pub synth_id: String,
    pub benchmark_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub benchmark: String,
    pub n: usize,
    pub benchmark_size: usize,
    pub synth_size: usize,
    /// Benchmark items sharing at least one n-gram with the synthesized set.
    pub matched_benchmark_items: usize,
    /// (synthesized, benchmark) pairs sharing at least one n-gram.
    pub matched_pairs: usize,
    pub samples: Vec<SampleMatch>,
}

/// [`count_matches_with`] using the default execution mode.
pub fn count_matches(
    benchmark: &str,
    synth: &[InstructionRecord],
    bench: &[InstructionRecord],
    n: usize,
) -> LeakageReport {
    count_matches_with(benchmark, synth, bench, n, Execution::default())
}

/// Counts benchmark contamination at gram size `n`. Gram extraction runs per
/// document (in parallel when enabled); the gram index is merged in input
/// order so reports are identical in both modes.
pub fn count_matches_with(
    benchmark: &str,
    synth: &[InstructionRecord],
    bench: &[InstructionRecord],
    n: usize,
    exec: Execution,
) -> LeakageReport {
    let synth_grams = exec::map(synth, exec, |r| extract_ngrams(&r.instruction, n));
    let mut index: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, grams) in synth_grams.into_iter().enumerate() {
        for g in grams {
            index.entry(g).or_default().push(i);
        }
    }

    let per_item = exec::map(bench, exec, |item| {
        let grams = extract_ngrams(&item.instruction, n);
        let mut partners: BTreeSet<usize> = BTreeSet::new();
        let mut first: Option<(&str, usize)> = None;
        for g in &grams {
            if let Some((key, owners)) = index.get_key_value(g) {
                partners.extend(owners.iter().copied());
                let candidate = (key.as_str(), owners[0]);
                if first.is_none_or(|f| candidate < f) {
                    first = Some(candidate);
                }
            }
        }
        (partners.len(), first.map(|(g, s)| (g.to_string(), s)))
    });

    let mut report = LeakageReport {
        benchmark: benchmark.to_string(),
        n,
        benchmark_size: bench.len(),
        synth_size: synth.len(),
        matched_benchmark_items: 0,
        matched_pairs: 0,
        samples: Vec::new(),
    };
    for (item, (pairs, first)) in bench.iter().zip(per_item) {
        if pairs > 0 {
            report.matched_benchmark_items += 1;
            report.matched_pairs += pairs;
        }
        if let (Some((gram, synth_idx)), true) = (first, report.samples.len() < SAMPLE_LIMIT) {
            report.samples.push(SampleMatch {
                gram,
                synth_id: synth[synth_idx].id.clone(),
                benchmark_id: item.id.clone(),
            });
        }
    }
    report
}
