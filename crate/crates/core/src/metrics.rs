//! Tag-count difficulty and tag-union diversity.
//!
//! Difficulty is the mean number of tags per sample; diversity is the size
//! of the union of all (normalized) tags over the sample.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InstructionRecord;
use crate::gateway::Gateway;
use crate::tagger::{normalize_tag, tag_instruction, TaggingFailure, TaggingSettings};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no tag sets to score")]
    EmptyInput,
    #[error("sample size {requested} exceeds dataset of {available} records")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("every sampled record failed tagging ({0} dropped)")]
    MetricsFailed(usize),
}

pub fn difficulty<S: AsRef<[String]>>(tag_sets: &[S]) -> Result<f64, MetricsError> {
    if tag_sets.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total: usize = tag_sets.iter().map(|s| s.as_ref().len()).sum();
    Ok(total as f64 / tag_sets.len() as f64)
}

/// Union size after normalizing every tag; tags that normalize to nothing
/// are ignored.
pub fn diversity<S: AsRef<[String]>>(tag_sets: &[S]) -> Result<usize, MetricsError> {
    if tag_sets.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let union: BTreeSet<String> = tag_sets
        .iter()
        .flat_map(|s| s.as_ref().iter())
        .filter_map(|t| normalize_tag(t).ok())
        .collect();
    Ok(union.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub difficulty: f64,
    pub diversity: usize,
    pub sample_size: usize,
    pub dropped: usize,
    pub model: String,
    pub per_sample_counts: Vec<usize>,
    pub sampled_ids: Vec<String>,
    pub failures: Vec<TaggingFailure>,
}

/// Draws `sample_size` records uniformly without replacement (in draw
/// order), re-tags each and scores the resulting tag sets.
pub fn evaluate_dataset<R: Rng + ?Sized>(
    records: &[InstructionRecord],
    gateway: &Gateway,
    sample_size: usize,
    rng: &mut R,
    settings: &TaggingSettings,
) -> Result<MetricsReport, MetricsError> {
    if sample_size == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if sample_size > records.len() {
        return Err(MetricsError::SampleTooLarge {
            requested: sample_size,
            available: records.len(),
        });
    }
    let sample: Vec<&InstructionRecord> = index::sample(rng, records.len(), sample_size)
        .into_iter()
        .map(|i| &records[i])
        .collect();
    let outcomes = gateway.for_each_bounded(&sample, |_, record| tag_instruction(record, gateway, settings));

    let mut tag_sets: Vec<Vec<String>> = Vec::new();
    let mut sampled_ids = Vec::new();
    let mut failures = Vec::new();
    for (record, outcome) in sample.iter().zip(outcomes) {
        match outcome {
            Ok(parsed) => {
                tag_sets.push(parsed.flat_tags().into_iter().collect());
                sampled_ids.push(record.id.clone());
            }
            Err(failure) => failures.push(failure),
        }
    }
    if tag_sets.is_empty() {
        return Err(MetricsError::MetricsFailed(failures.len()));
    }
    Ok(MetricsReport {
        difficulty: difficulty(&tag_sets)?,
        diversity: diversity(&tag_sets)?,
        sample_size,
        dropped: failures.len(),
        model: settings.model.clone(),
        per_sample_counts: tag_sets.iter().map(Vec::len).collect(),
        sampled_ids,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use crate::tagger::build_tagging_prompt;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sets(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter().map(|s| s.iter().map(|t| t.to_string()).collect()).collect()
    }

    #[test]
    fn fixture_scores() {
        let s = sets(&[&["a"], &["a", "b"], &["a", "b", "c"]]);
        assert_eq!(difficulty(&s).unwrap(), 2.0);
        assert_eq!(diversity(&s).unwrap(), 3);
        assert_eq!(difficulty(&sets(&[&[]])).unwrap(), 0.0);
        assert_eq!(diversity(&sets(&[&["Loops"], &["loops "]])).unwrap(), 1);
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(difficulty(&empty), Err(MetricsError::EmptyInput));
        assert_eq!(diversity(&empty), Err(MetricsError::EmptyInput));
    }

    fn tag_reply(tags: &[String]) -> String {
        format!("#Aspect2Tags#\n{{\"skill\": {}}}", serde_json::to_string(tags).unwrap())
    }

    #[test]
    fn evaluates_mock_tagged_sample() {
        let records: Vec<_> = (0..60).map(|i| InstructionRecord::new(format!("r{i}"), format!("task {i}"))).collect();
        let mock = MockBackend::new();
        for (i, r) in records.iter().enumerate() {
            let tags = vec![format!("tag {i} a"), format!("tag {i} b")];
            mock.register_prompt(&build_tagging_prompt(r).unwrap(), tag_reply(&tags));
        }
        let gw = Gateway::new(mock);
        let settings = TaggingSettings::new("judge");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let report = evaluate_dataset(&records, &gw, 50, &mut rng, &settings).unwrap();
        assert_eq!(report.difficulty, 2.0);
        assert_eq!(report.diversity, 100);
        assert_eq!(report.dropped, 0);
        assert_eq!(report.model, "judge");

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(evaluate_dataset(&records, &gw, 50, &mut rng2, &settings).unwrap(), report);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(
            evaluate_dataset(&records[..10], &gw, 50, &mut rng, &settings),
            Err(MetricsError::SampleTooLarge { requested: 50, available: 10 })
        );
    }

    #[test]
    fn dropped_samples_are_counted() {
        let records: Vec<_> = (0..4).map(|i| InstructionRecord::new(format!("r{i}"), format!("task {i}"))).collect();
        let mock = MockBackend::new();
        mock.register_prompt(&build_tagging_prompt(&records[0]).unwrap(), tag_reply(&["x".into()]));
        let gw = Gateway::new(mock);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = evaluate_dataset(&records, &gw, 4, &mut rng, &TaggingSettings::new("m")).unwrap();
        assert_eq!(report.dropped, 3);
        assert_eq!(report.per_sample_counts, vec![1]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            evaluate_dataset(&records[1..], &gw, 3, &mut rng, &TaggingSettings::new("m")),
            Err(MetricsError::MetricsFailed(3))
        );
    }

    proptest! {
        #[test]
        fn invariant_under_permutation_and_duplication(
            raw in proptest::collection::vec(proptest::collection::btree_set("[a-e]", 0..4), 1..12),
            shift in 0usize..12,
        ) {
            let s: Vec<Vec<String>> = raw.iter().map(|b| b.iter().cloned().collect()).collect();
            let mut rotated = s.clone();
            rotated.rotate_left(shift % s.len());
            prop_assert_eq!(difficulty(&s).unwrap(), difficulty(&rotated).unwrap());
            prop_assert_eq!(diversity(&s).unwrap(), diversity(&rotated).unwrap());
            let doubled: Vec<_> = s.iter().chain(s.iter()).cloned().collect();
            prop_assert_eq!(diversity(&doubled).unwrap(), diversity(&s).unwrap());
            let total: usize = s.iter().map(Vec::len).sum();
            prop_assert!(diversity(&s).unwrap() <= total);
        }

        #[test]
        fn union_is_at_least_each_part(
            a in proptest::collection::vec(proptest::collection::vec("[a-f]", 0..4), 1..6),
            b in proptest::collection::vec(proptest::collection::vec("[a-f]", 0..4), 1..6),
        ) {
            let joined: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
            let d = diversity(&joined).unwrap();
            prop_assert!(d >= diversity(&a).unwrap().max(diversity(&b).unwrap()));
        }
    }
}
