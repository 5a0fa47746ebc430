//! Binary alignment decisions between two responses.

use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{judge_request_text, FmClient, FmError, PromptKind};
use crate::embedding::{cosine_similarity, Embedder, EmbeddingError};
use crate::model::{choice_label, label_index, ComparatorStrategy, RarConfig, RequestRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVerdict {
    pub similar: bool,
    pub score: Option<f64>,
    pub strategy: ComparatorStrategy,
}

/// Which argument of a comparison failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error("cannot compare empty text")]
    EmptyInput,
    #[error("judge replied {0:?}; expected `similar` or `different`")]
    JudgeParse(String),
    #[error("no answer option found in {0:?}")]
    ChoiceExtraction(String),
    #[error("exact-choice comparison needs answer options")]
    MissingChoices,
    #[error("judge strategy configured without a judge client")]
    MissingJudge,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Backend(#[from] FmError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{side:?} response: {source}")]
pub struct SidedCompareError {
    pub side: Option<Side>,
    #[source]
    pub source: CompareError,
}

impl From<CompareError> for SidedCompareError {
    fn from(source: CompareError) -> Self {
        Self { side: None, source }
    }
}

fn answer_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i:\banswer)(?:\s+(?i:is)\s*:?|\s*:)\s*\(?([A-Z])\)?(?:[^A-Za-z0-9]|$)").expect("valid regex")
    })
}

fn lone_letter_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(?([A-Z])[.)]?$").expect("valid regex"))
}

/// Pulls the final answer label out of free text.
///
/// Patterns, in priority order, each taking its last occurrence:
/// 1. `answer is X` / `Answer: X`;
/// 2. an option letter alone on a line (`C`, `C.`, `(C)`);
/// 3. the verbatim text of a choice.
pub fn extract_choice(text: &str, choices: &[String]) -> Result<char, CompareError> {
    if choices.is_empty() {
        return Err(CompareError::MissingChoices);
    }
    let n = choices.len();
    let in_range = |c: char| label_index(c).is_some_and(|i| i < n);

    let from_answer = answer_pattern()
        .captures_iter(text)
        .filter_map(|c| c[1].chars().next())
        .filter(|c| in_range(*c))
        .last();
    if let Some(label) = from_answer {
        return Ok(label);
    }

    let from_line = text
        .lines()
        .filter_map(|line| lone_letter_pattern().captures(line.trim()))
        .filter_map(|c| c[1].chars().next())
        .rfind(|c| in_range(*c));
    if let Some(label) = from_line {
        return Ok(label);
    }

    choices
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty())
        .filter_map(|(i, c)| text.rfind(c.as_str()).map(|pos| (pos, c.len(), i)))
        .max()
        .map(|(_, _, i)| choice_label(i))
        .ok_or_else(|| CompareError::ChoiceExtraction(text.chars().take(120).collect()))
}

/// Parses a single-word judge reply.
pub fn parse_judge_reply(reply: &str) -> Result<bool, CompareError> {
    let word = reply
        .trim()
        .trim_end_matches(['.', '!'])
        .trim_matches(|c| c == '"' || c == '\'')
        .to_ascii_lowercase();
    match word.as_str() {
        "similar" => Ok(true),
        "different" => Ok(false),
        _ => Err(CompareError::JudgeParse(reply.to_string())),
    }
}

pub struct Comparator {
    strategy: ComparatorStrategy,
    threshold: f64,
    embedder: Arc<dyn Embedder>,
    judge: Option<Arc<dyn FmClient>>,
}

impl Comparator {
    pub fn new(config: &RarConfig, embedder: Arc<dyn Embedder>, judge: Option<Arc<dyn FmClient>>) -> Self {
        Self {
            strategy: config.comparator_strategy,
            threshold: config.response_sim_threshold,
            embedder,
            judge,
        }
    }

    pub fn strategy(&self) -> ComparatorStrategy {
        self.strategy
    }

    pub async fn compare(
        &self,
        a: &str,
        b: &str,
        choices: Option<&[String]>,
    ) -> Result<SimilarityVerdict, SidedCompareError> {
        if a.trim().is_empty() || b.trim().is_empty() {
            return Err(CompareError::EmptyInput.into());
        }
        let strategy = self.strategy;
        match strategy {
            ComparatorStrategy::VectorThreshold => {
                let ea = self.embedder.embed(a).await.map_err(CompareError::from)?;
                let eb = self.embedder.embed(b).await.map_err(CompareError::from)?;
                let score = cosine_similarity(&ea, &eb).map_err(CompareError::from)?;
                Ok(SimilarityVerdict {
                    similar: score >= self.threshold,
                    score: Some(score),
                    strategy,
                })
            }
            ComparatorStrategy::JudgeClient => {
                let judge = self.judge.as_ref().ok_or(CompareError::MissingJudge)?;
                let request = RequestRecord::new("judge", judge_request_text(a, b));
                let reply = judge
                    .complete(PromptKind::Judge, &request, None)
                    .await
                    .map_err(CompareError::from)?;
                Ok(SimilarityVerdict {
                    similar: parse_judge_reply(&reply)?,
                    score: None,
                    strategy,
                })
            }
            ComparatorStrategy::ExactChoice => {
                let choices = choices.ok_or(CompareError::MissingChoices)?;
                let sided = |side| {
                    move |source| SidedCompareError {
                        side: Some(side),
                        source,
                    }
                };
                let la = extract_choice(a, choices).map_err(sided(Side::First))?;
                let lb = extract_choice(b, choices).map_err(sided(Side::Second))?;
                Ok(SimilarityVerdict {
                    similar: la == lb,
                    score: None,
                    strategy,
                })
            }
        }
    }
}
