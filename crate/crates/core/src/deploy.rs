//! Serializable description of a deployment's backends.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{AnswerKey, FmClient, FmClientSpec, FmError, SyntheticProfile};
use crate::embedding::{Embedder, EmbedderSpec, EmbeddingError};
use crate::engine::{Engine, EngineError, StaticRouterSpec};
use crate::memory::MemoryStore;
use crate::model::{ModelTier, RarConfig};

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("deployment file: {0}")]
    Io(#[from] std::io::Error),
    #[error("deployment file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] FmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone)]
pub struct Backends {
    pub weak: Arc<dyn FmClient>,
    pub strong: Arc<dyn FmClient>,
    pub embedder: Arc<dyn Embedder>,
}

/// Produces a fresh set of backends, e.g. once per experiment shuffle.
pub trait BackendFactory: Send + Sync {
    /// `answers` maps request ids to reference labels; clients that cannot
    /// use it ignore it.
    fn backends(&self, dim: usize, answers: Option<AnswerKey>) -> Result<Backends, DeployError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentSpec {
    pub weak: FmClientSpec,
    pub strong: FmClientSpec,
    #[serde(default = "StaticRouterSpec::always_strong")]
    pub router: StaticRouterSpec,
    #[serde(default)]
    pub embedder: EmbedderSpec,
}

impl Default for DeploymentSpec {
    fn default() -> Self {
        Self::synthetic(SyntheticProfile {
            seed: 0,
            p_alone: 0.2,
            p_guided: 0.4,
            domain_strict: true,
        })
    }
}

impl DeploymentSpec {
    /// Synthetic weak and strong models sharing `profile`.
    pub fn synthetic(profile: SyntheticProfile) -> Self {
        Self {
            weak: FmClientSpec::synthetic(ModelTier::Weak, profile.clone()),
            strong: FmClientSpec::synthetic(ModelTier::Strong, profile),
            router: StaticRouterSpec::always_strong(),
            embedder: EmbedderSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, DeployError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DeployError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        if self.weak.tier != ModelTier::Weak || self.strong.tier != ModelTier::Strong {
            return Err(DeployError::Invalid(
                "weak/strong client specs have the wrong tiers".into(),
            ));
        }
        self.router.validate().map_err(|e| DeployError::Invalid(e.to_string()))
    }

    /// Engine over these backends, starting from `memory` if given.
    pub fn engine(&self, config: RarConfig, memory: Option<MemoryStore>) -> Result<Engine, DeployError> {
        let backends = self.backends(config.embedding_dim, None)?;
        let mut builder = Engine::builder(config, backends.weak, backends.strong)
            .router(self.router.clone())
            .embedder(backends.embedder);
        if let Some(memory) = memory {
            builder = builder.memory(memory);
        }
        Ok(builder.build()?)
    }
}

impl BackendFactory for DeploymentSpec {
    fn backends(&self, dim: usize, answers: Option<AnswerKey>) -> Result<Backends, DeployError> {
        self.validate()?;
        Ok(Backends {
            weak: self.weak.build(answers.clone())?,
            strong: self.strong.build(answers)?,
            embedder: self.embedder.build(dim)?,
        })
    }
}
