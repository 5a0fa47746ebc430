//! Shared request/response types and the engine configuration schema.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

/// The two model tiers RAR routes between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTier {
    Weak,
    Strong,
}

impl ModelTier {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTier::Weak => "weak",
            ModelTier::Strong => "strong",
        }
    }
}

impl fmt::Display for ModelTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a guide used for a weak-tier completion came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuideSource {
    FreshFromStrong,
    FromMemory,
}

/// Label of the path a request took through the engine.
///
/// The first four variants are foreground routing decisions; the `Case*`
/// variants are shadow-inference results. `ProfileUnsolved` is produced only
/// while the engine runs in profiling mode, where failures are not recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseKind {
    StaticWeak,
    MemoryDirectWeak,
    MemoryGuidedWeak,
    MemoryForcedStrong,
    Case1SolvedAlone,
    Case2SolvedWithGuide,
    Case3Failed,
    ProfileUnsolved,
}

impl CaseKind {
    pub fn is_shadow(self) -> bool {
        matches!(
            self,
            CaseKind::Case1SolvedAlone
                | CaseKind::Case2SolvedWithGuide
                | CaseKind::Case3Failed
                | CaseKind::ProfileUnsolved
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RequestError {
    #[error("request text is empty")]
    EmptyText,
    #[error("request needs at least two choices, got {0}")]
    TooFewChoices(usize),
    #[error("request has more choices ({0}) than option labels")]
    TooManyChoices(usize),
    #[error("duplicate choice {0:?}")]
    DuplicateChoice(String),
    #[error("cached embedding has dimension {got}, expected {expected}")]
    EmbeddingDim { expected: usize, got: usize },
}

/// Maximum number of answer options; labels run `A..=Z`.
pub const MAX_CHOICES: usize = 26;

/// Option label for the `index`-th choice (`0 -> 'A'`).
pub fn choice_label(index: usize) -> char {
    assert!(index < MAX_CHOICES, "choice index {index} out of range");
    (b'A' + index as u8) as char
}

/// Index of an option label (`'C' -> 2`), if it is an uppercase ASCII letter.
pub fn label_index(label: char) -> Option<usize> {
    label.is_ascii_uppercase().then(|| (label as u8 - b'A') as usize)
}

/// An inbound request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

impl RequestRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            domain: None,
            choices: None,
            embedding: None,
        }
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn with_choices<I, S>(mut self, choices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.choices = Some(choices.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_embedding(mut self, embedding: EmbeddingVector) -> Self {
        self.embedding = Some(embedding);
        self
    }

    /// Checks the record invariants against an embedding dimension.
    pub fn validate(&self, dim: usize) -> Result<(), RequestError> {
        if self.text.trim().is_empty() {
            return Err(RequestError::EmptyText);
        }
        if let Some(choices) = &self.choices {
            validate_choices(choices)?;
        }
        if let Some(embedding) = &self.embedding {
            if embedding.dim() != dim {
                return Err(RequestError::EmbeddingDim {
                    expected: dim,
                    got: embedding.dim(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_choices(choices: &[String]) -> Result<(), RequestError> {
    if choices.len() < 2 {
        return Err(RequestError::TooFewChoices(choices.len()));
    }
    if choices.len() > MAX_CHOICES {
        return Err(RequestError::TooManyChoices(choices.len()));
    }
    for (i, c) in choices.iter().enumerate() {
        if choices[..i].contains(c) {
            return Err(RequestError::DuplicateChoice(c.clone()));
        }
    }
    Ok(())
}

/// What the engine hands back to the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub tier: ModelTier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide_id: Option<String>,
    /// `None` while a shadow task for this request is still pending.
    pub case: Option<CaseKind>,
    /// Strong-tier invocations attributable to this request. Responses from
    /// `Engine::handle` only include the foreground call; the shadow share is
    /// added by `Engine::handle_and_shadow`.
    pub strong_calls_incurred: u32,
}

/// Strong-model-authored hint text for the weak tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guide {
    pub id: String,
    pub text: String,
    /// Request that caused generation. For guides reused from memory this is
    /// the id of the memory entry that holds the guide.
    pub origin_request_id: String,
    pub source: GuideSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// How two responses are judged aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComparatorStrategy {
    VectorThreshold,
    JudgeClient,
    ExactChoice,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}` out of range: {value}")]
    Range { field: &'static str, value: String },
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
}

impl ConfigError {
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ConfigError::Range { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Engine configuration. Serialized as a flat JSON object; unknown keys are
/// rejected and missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RarConfig {
    pub embedding_dim: usize,
    /// Cutoff for memory lookups. Lower values reuse guides from less similar
    /// requests; higher values push toward fresh guide generation.
    pub memory_sim_threshold: f64,
    pub response_sim_threshold: f64,
    pub max_fresh_guides: u32,
    /// Number of handled requests a `RequiresStrong` entry stays pinned to
    /// the strong tier before similar requests are shadowed again.
    pub retry_period: u64,
    pub comparator_strategy: ComparatorStrategy,
    pub rng_seed: u64,
}

impl Default for RarConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 384,
            memory_sim_threshold: 0.2,
            response_sim_threshold: 0.9,
            max_fresh_guides: 2,
            retry_period: 500,
            comparator_strategy: ComparatorStrategy::VectorThreshold,
            rng_seed: 0,
        }
    }
}

impl RarConfig {
    pub fn validate(self) -> Result<Self, ConfigError> {
        fn unit(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Range {
                    field,
                    value: v.to_string(),
                })
            }
        }
        if self.embedding_dim == 0 {
            return Err(ConfigError::Range {
                field: "embedding_dim",
                value: "0".into(),
            });
        }
        unit("memory_sim_threshold", self.memory_sim_threshold)?;
        unit("response_sim_threshold", self.response_sim_threshold)?;
        if self.max_fresh_guides == 0 {
            return Err(ConfigError::Range {
                field: "max_fresh_guides",
                value: "0".into(),
            });
        }
        if self.retry_period == 0 {
            return Err(ConfigError::Range {
                field: "retry_period",
                value: "0".into(),
            });
        }
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str::<Self>(text)?.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Monotonic id source: `prefix-0`, `prefix-1`, ...
#[derive(Debug)]
pub struct IdGenerator {
    prefix: String,
    next: AtomicU64,
}

impl IdGenerator {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self::starting_at(prefix, 0)
    }

    pub fn starting_at(prefix: impl Into<String>, start: u64) -> Self {
        Self {
            prefix: prefix.into(),
            next: AtomicU64::new(start),
        }
    }

    pub fn next_id(&self) -> String {
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        format!("{}-{}", self.prefix, n)
    }
}
