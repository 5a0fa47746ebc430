//! Text embedders and cosine similarity.
//!
//! The reference embedder is signed feature hashing over character 3-grams:
//!
//! 1. lowercase the text;
//! 2. for every window of three consecutive characters, compute
//!    `h = hash64(FEATURE_HASH_SEED, utf8(window))`;
//! 3. add `+1` to bucket `h % dim` when bit 63 of `h` is clear, `-1` otherwise;
//! 4. L2-normalize.
//!
//! Texts shorter than three characters hash each whitespace-separated token
//! instead. If the accumulator still cancels to zero, the vector is the unit
//! vector at bucket `hash64(FEATURE_HASH_SEED, utf8(text)) % dim`.
//!
//! `hash64` is FNV-1a (64-bit) with the seed XORed into the offset basis,
//! followed by the SplitMix64 finalizer. Both are fixed here so persisted
//! memories stay portable across runs and machines.
//!
//! The sign bit keeps the expected inner product of unrelated texts at zero.
//! Unsigned accumulation biases every pair of texts toward positive
//! similarity, which at 384 buckets pushes most unrelated pairs past a 0.2
//! lookup cutoff.

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_HASH_SEED: u64 = 0x5241_525f_4648_3031;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `bytes`, with `seed` folded into the offset basis.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET ^ seed, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash64(seed: u64, bytes: &[u8]) -> u64 {
    mix64(fnv1a64(seed, bytes))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector is not finite")]
    NonFinite,
    #[error("vector norm {0} is not 1")]
    NotUnit(f64),
    #[error("embedding service: {0}")]
    Transport(String),
}

/// Allowed deviation of a stored vector's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    /// Accepts `values` as-is if already unit length within tolerance.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnit(norm));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        EmbeddingVector::from_unit(values).map_err(serde::de::Error::custom)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`. Symmetric bit-for-bit.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(cosine_with_norms(a.values(), b.values(), a.norm(), b.norm()))
}

/// Cosine with precomputed norms; equal to [`cosine_similarity`] when the
/// norms were computed the same way.
pub(crate) fn cosine_with_norms(a: &[f64], b: &[f64], norm_a: f64, norm_b: f64) -> f64 {
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Signed feature-hash embedding of `text` into `dim` buckets.
pub fn feature_hash(text: &str, dim: usize) -> Result<EmbeddingVector, EmbeddingError> {
    assert!(dim > 0, "embedding dimension must be positive");
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut acc = vec![0.0f64; dim];
    let mut add = |bytes: &[u8]| {
        let h = hash64(FEATURE_HASH_SEED, bytes);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[(h % dim as u64) as usize] += sign;
    };
    if chars.len() >= 3 {
        let mut buf = String::with_capacity(12);
        for window in chars.windows(3) {
            buf.clear();
            buf.extend(window);
            add(buf.as_bytes());
        }
    } else {
        for token in lower.split_whitespace() {
            add(token.as_bytes());
        }
    }
    if acc.iter().all(|v| *v == 0.0) {
        acc[(hash64(FEATURE_HASH_SEED, lower.as_bytes()) % dim as u64) as usize] = 1.0;
    }
    EmbeddingVector::normalized(acc)
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Deterministic reference embedder; see the module docs for the algorithm.
#[derive(Debug, Clone, Copy)]
pub struct FeatureHashEmbedder {
    dim: usize,
}

impl FeatureHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        feature_hash(text, self.dim)
    }
}

#[async_trait]
impl Embedder for FeatureHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed_text(text)
    }
}

/// Embedder backed by an HTTP service: `POST {"input": text}` returning
/// `{"embedding": [...]}`. Responses are normalized on receipt.
pub struct HttpEmbedder {
    client: reqwest::Client,
    endpoint: String,
    dim: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoint: endpoint.into(),
            dim,
        }
    }
}

#[async_trait]
impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let transport = |e: reqwest::Error| EmbeddingError::Transport(e.to_string());
        let body: EmbedResponse = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { input: text })
            .send()
            .await
            .map_err(transport)?
            .error_for_status()
            .map_err(transport)?
            .json()
            .await
            .map_err(transport)?;
        if body.embedding.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: body.embedding.len(),
            });
        }
        EmbeddingVector::normalized(body.embedding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    FeatureHash,
    ExternalService,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::FeatureHash,
            endpoint: None,
        }
    }
}

impl EmbedderSpec {
    pub fn build(&self, dim: usize) -> Result<Arc<dyn Embedder>, EmbeddingError> {
        match (self.kind, &self.endpoint) {
            (EmbedderKind::FeatureHash, _) => Ok(Arc::new(FeatureHashEmbedder::new(dim))),
            (EmbedderKind::ExternalService, Some(url)) => Ok(Arc::new(HttpEmbedder::new(url, dim))),
            (EmbedderKind::ExternalService, None) => Err(EmbeddingError::Transport(
                "external embedder requires an endpoint".into(),
            )),
        }
    }
}
