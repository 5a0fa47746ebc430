//! Synthetic multiple-choice corpus.
//!
//! Questions are strings of random lowercase words, so distinct questions
//! have low embedding similarity and identical ones match exactly. Domains
//! are assigned round-robin and never appear in the question text.

use super::dataset::DatasetItem;
use super::rng::SplitMix64;
use crate::model::choice_label;

const WORDS_PER_QUESTION: u64 = 14;

fn word(rng: &mut SplitMix64) -> String {
    let len = 3 + rng.below(7);
    (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
}

/// `count` items with ids `{prefix}-{i}`, four choices each.
pub fn synthetic_dataset(count: usize, seed: u64, prefix: &str, domains: &[String]) -> Vec<DatasetItem> {
    assert!(!domains.is_empty(), "at least one domain is required");
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|i| {
            let question = (0..WORDS_PER_QUESTION)
                .map(|_| word(&mut rng))
                .collect::<Vec<_>>()
                .join(" ");
            let choices = (0..4).map(|k| format!("{} {}", word(&mut rng), k + 1)).collect();
            DatasetItem {
                id: format!("{prefix}-{i}"),
                question,
                choices,
                answer_label: choice_label(rng.below(4) as usize),
                domain: domains[i % domains.len()].clone(),
            }
        })
        .collect()
}
