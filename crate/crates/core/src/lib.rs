//! Real-time adaptive routing between a weak and a strong foundation model.
//!
//! Requests the static router sends to the strong model are answered by it,
//! then replayed in the background against the weak model. What the weak
//! model can handle, alone or with a guide written by the strong model, is
//! remembered so that similar requests can later be served by the weak model.

pub mod backends;
pub mod compare;
pub mod deploy;
pub mod embedding;
pub mod engine;
pub mod harness;
pub mod memory;
pub mod model;

pub use backends::{FmClient, FmClientSpec, FmError, PromptKind, SyntheticFm, SyntheticProfile};
pub use compare::{extract_choice, Comparator, CompareError, SimilarityVerdict};
pub use deploy::{BackendFactory, Backends, DeploymentSpec};
pub use embedding::{cosine_similarity, Embedder, EmbedderSpec, EmbeddingError, EmbeddingVector, FeatureHashEmbedder};
pub use engine::{
    CaseOutcome, Engine, EngineBuilder, EngineError, EngineStats, ShadowMode, StaticRouterKind, StaticRouterSpec,
};
pub use memory::{EntryFlag, MemoryEntry, MemoryError, MemoryStore, QueryHit};
pub use model::{
    CaseKind, ComparatorStrategy, CompletionResponse, ConfigError, Guide, GuideSource, ModelTier, RarConfig,
    RequestError, RequestRecord,
};
