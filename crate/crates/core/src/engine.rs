//! The routing engine: static-router front stage, memory-first routing of
//! strong-bound requests, and shadow inference.
//!
//! Request flow:
//!
//! 1. The static router picks a tier. Weak-routed requests go straight to
//!    the weak model.
//! 2. Strong-routed requests are looked up in memory. A `SolvedAlone` hit is
//!    served by the weak model, a `SolvedWithGuide` hit by the weak model with
//!    the stored guide, and a `RequiresStrong` hit by the strong model until
//!    its retry point.
//! 3. Otherwise the strong model answers and a shadow task checks, in the
//!    background, whether the weak model could have served the request alone
//!    (case 1), with a guide from memory or freshly generated (case 2), or not
//!    at all (case 3). The result is recorded in memory.
//!
//! A retry of a request's own `RequiresStrong` entry only tries guides already
//! in memory: its fresh-guide budget was spent when the entry was created.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{watch, Semaphore};

use crate::backends::{FmClient, FmError, PromptKind};
use crate::compare::{Comparator, CompareError, Side, SidedCompareError};
use crate::embedding::{Embedder, EmbeddingError, EmbeddingVector, FeatureHashEmbedder};
use crate::memory::{EntryFlag, MemoryEntry, MemoryError, MemoryStore, SharedMemory};
use crate::model::{
    CaseKind, CompletionResponse, ConfigError, Guide, GuideSource, IdGenerator, ModelTier, RarConfig, RequestError,
    RequestRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticRouterKind {
    AlwaysStrong,
    AlwaysWeak,
    OracleProfile,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticRouterSpec {
    pub kind: StaticRouterKind,
    /// Ids the weak tier is known to solve (`OracleProfile`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_set: Option<BTreeSet<String>>,
    /// Decision service (`External`): `POST {"text": ...}` returning
    /// `{"tier": "weak" | "strong"}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl StaticRouterSpec {
    pub fn always_strong() -> Self {
        Self {
            kind: StaticRouterKind::AlwaysStrong,
            profile_set: None,
            endpoint: None,
        }
    }

    pub fn always_weak() -> Self {
        Self {
            kind: StaticRouterKind::AlwaysWeak,
            ..Self::always_strong()
        }
    }

    pub fn oracle(profile: BTreeSet<String>) -> Self {
        Self {
            kind: StaticRouterKind::OracleProfile,
            profile_set: Some(profile),
            endpoint: None,
        }
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        match self.kind {
            StaticRouterKind::OracleProfile if self.profile_set.is_none() => {
                Err(RouterError::Spec("OracleProfile router needs profile_set".into()))
            }
            StaticRouterKind::External if self.endpoint.is_none() => {
                Err(RouterError::Spec("External router needs an endpoint".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouterError {
    #[error("invalid router spec: {0}")]
    Spec(String),
    #[error("router service: {0}")]
    Transport(String),
}

pub struct StaticRouter {
    spec: StaticRouterSpec,
    http: Option<reqwest::Client>,
}

#[derive(Serialize)]
struct RouteRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct RouteReply {
    tier: ModelTier,
}

impl StaticRouter {
    pub fn new(spec: StaticRouterSpec) -> Result<Self, RouterError> {
        spec.validate()?;
        let http = (spec.kind == StaticRouterKind::External).then(reqwest::Client::new);
        Ok(Self { spec, http })
    }

    pub fn spec(&self) -> &StaticRouterSpec {
        &self.spec
    }

    pub async fn route(&self, request: &RequestRecord) -> Result<ModelTier, RouterError> {
        match self.spec.kind {
            StaticRouterKind::AlwaysStrong => Ok(ModelTier::Strong),
            StaticRouterKind::AlwaysWeak => Ok(ModelTier::Weak),
            StaticRouterKind::OracleProfile => {
                let known = self.spec.profile_set.as_ref().is_some_and(|s| s.contains(&request.id));
                Ok(if known { ModelTier::Weak } else { ModelTier::Strong })
            }
            StaticRouterKind::External => {
                let (Some(http), Some(url)) = (&self.http, &self.spec.endpoint) else {
                    return Err(RouterError::Spec("External router needs an endpoint".into()));
                };
                let transport = |e: reqwest::Error| RouterError::Transport(e.to_string());
                let reply: RouteReply = http
                    .post(url)
                    .json(&RouteRequest { text: &request.text })
                    .send()
                    .await
                    .and_then(|r| r.error_for_status())
                    .map_err(transport)?
                    .json()
                    .await
                    .map_err(transport)?;
                Ok(reply.tier)
            }
        }
    }
}

pub async fn static_route(spec: &StaticRouterSpec, request: &RequestRecord) -> Result<ModelTier, RouterError> {
    StaticRouter::new(spec.clone())?.route(request).await
}

/// Result of a request's trip through the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub kind: CaseKind,
    pub guide_source: Option<GuideSource>,
    pub strong_calls: u32,
}

/// What shadow inference is allowed to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowMode {
    /// Cases 1-3 with fresh guide generation.
    Full,
    /// Only checks whether the weak tier solves requests alone; successes are
    /// recorded, failures are not.
    ProfileOnly,
    /// Guides come only from existing memory and memory is never modified.
    ReuseOnly,
}

impl ShadowMode {
    fn to_u8(self) -> u8 {
        match self {
            ShadowMode::Full => 0,
            ShadowMode::ProfileOnly => 1,
            ShadowMode::ReuseOnly => 2,
        }
    }

    fn from_u8(v: u8) -> Self {
        match v {
            1 => ShadowMode::ProfileOnly,
            2 => ShadowMode::ReuseOnly,
            _ => ShadowMode::Full,
        }
    }
}

/// Engine counters, updated together under one lock so readers never see a
/// half-applied event.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub total_requests: u64,
    pub weak_served: u64,
    pub strong_served: u64,
    pub failed_requests: u64,
    pub static_weak: u64,
    pub memory_direct: u64,
    pub memory_guided: u64,
    pub memory_forced: u64,
    pub shadow_completed: u64,
    pub shadow_failed: u64,
    pub case1_count: u64,
    pub case2_count: u64,
    pub case3_count: u64,
    pub profile_unsolved_count: u64,
    pub guides_from_memory: u64,
    pub guides_fresh: u64,
    pub strong_calls_total: u64,
}

impl EngineStats {
    /// The invariants a consistent snapshot satisfies.
    pub fn is_consistent(&self) -> bool {
        self.weak_served + self.strong_served == self.total_requests
            && self.guides_from_memory + self.guides_fresh == self.case2_count
            && self.static_weak + self.memory_direct + self.memory_guided <= self.weak_served
            && self.case1_count + self.case2_count + self.case3_count + self.profile_unsolved_count
                == self.shadow_completed
    }

    /// Counter increments between `earlier` and `self`.
    pub fn since(&self, earlier: &EngineStats) -> EngineStats {
        EngineStats {
            total_requests: self.total_requests - earlier.total_requests,
            weak_served: self.weak_served - earlier.weak_served,
            strong_served: self.strong_served - earlier.strong_served,
            failed_requests: self.failed_requests - earlier.failed_requests,
            static_weak: self.static_weak - earlier.static_weak,
            memory_direct: self.memory_direct - earlier.memory_direct,
            memory_guided: self.memory_guided - earlier.memory_guided,
            memory_forced: self.memory_forced - earlier.memory_forced,
            shadow_completed: self.shadow_completed - earlier.shadow_completed,
            shadow_failed: self.shadow_failed - earlier.shadow_failed,
            case1_count: self.case1_count - earlier.case1_count,
            case2_count: self.case2_count - earlier.case2_count,
            case3_count: self.case3_count - earlier.case3_count,
            profile_unsolved_count: self.profile_unsolved_count - earlier.profile_unsolved_count,
            guides_from_memory: self.guides_from_memory - earlier.guides_from_memory,
            guides_fresh: self.guides_fresh - earlier.guides_fresh,
            strong_calls_total: self.strong_calls_total - earlier.strong_calls_total,
        }
    }

    fn record_served(&mut self, tier: ModelTier, kind: Option<CaseKind>) {
        self.total_requests += 1;
        match tier {
            ModelTier::Weak => self.weak_served += 1,
            ModelTier::Strong => self.strong_served += 1,
        }
        match kind {
            Some(CaseKind::StaticWeak) => self.static_weak += 1,
            Some(CaseKind::MemoryDirectWeak) => self.memory_direct += 1,
            Some(CaseKind::MemoryGuidedWeak) => self.memory_guided += 1,
            Some(CaseKind::MemoryForcedStrong) => self.memory_forced += 1,
            _ => {}
        }
    }

    fn record_shadow(&mut self, outcome: &CaseOutcome) {
        self.shadow_completed += 1;
        match outcome.kind {
            CaseKind::Case1SolvedAlone => self.case1_count += 1,
            CaseKind::Case2SolvedWithGuide => {
                self.case2_count += 1;
                match outcome.guide_source {
                    Some(GuideSource::FromMemory) => self.guides_from_memory += 1,
                    _ => self.guides_fresh += 1,
                }
            }
            CaseKind::Case3Failed => self.case3_count += 1,
            CaseKind::ProfileUnsolved => self.profile_unsolved_count += 1,
            _ => {}
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid request: {0}")]
    Request(#[from] RequestError),
    #[error("{tier} backend failed: {source}")]
    Backend {
        tier: ModelTier,
        #[source]
        source: FmError,
    },
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("comparing responses: {0}")]
    Compare(#[from] SidedCompareError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("engine setup: {0}")]
    Setup(String),
}

impl EngineError {
    /// Name of the component whose failure this is, for error reporting.
    pub fn failed_component(&self) -> Option<&'static str> {
        match self {
            EngineError::Backend { tier, .. } => Some(tier.as_str()),
            EngineError::Router(RouterError::Transport(_)) => Some("router"),
            EngineError::Embedding(EmbeddingError::Transport(_)) => Some("embedder"),
            _ => None,
        }
    }
}

pub struct EngineBuilder {
    config: RarConfig,
    weak: Arc<dyn FmClient>,
    strong: Arc<dyn FmClient>,
    router: StaticRouterSpec,
    embedder: Option<Arc<dyn Embedder>>,
    judge: Option<Arc<dyn FmClient>>,
    memory: Option<MemoryStore>,
    shadow_parallelism: usize,
    mode: ShadowMode,
}

impl EngineBuilder {
    pub fn router(mut self, spec: StaticRouterSpec) -> Self {
        self.router = spec;
        self
    }

    pub fn embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    /// Client answering judge prompts; defaults to the strong client.
    pub fn judge(mut self, judge: Arc<dyn FmClient>) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn memory(mut self, memory: MemoryStore) -> Self {
        self.memory = Some(memory);
        self
    }

    pub fn shadow_parallelism(mut self, n: usize) -> Self {
        self.shadow_parallelism = n.max(1);
        self
    }

    pub fn shadow_mode(mut self, mode: ShadowMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn build(self) -> Result<Engine, EngineError> {
        let config = self.config.validate()?;
        let dim = config.embedding_dim;
        if self.weak.tier() != ModelTier::Weak || self.strong.tier() != ModelTier::Strong {
            return Err(EngineError::Setup("weak/strong clients have the wrong tiers".into()));
        }
        let embedder = self.embedder.unwrap_or_else(|| Arc::new(FeatureHashEmbedder::new(dim)));
        if embedder.dim() != dim {
            return Err(EngineError::Setup(format!(
                "embedder dimension {} != configured {dim}",
                embedder.dim()
            )));
        }
        let memory = self.memory.unwrap_or_else(|| MemoryStore::new(dim));
        if memory.dim() != dim {
            return Err(EngineError::Setup(format!(
                "memory dimension {} != configured {dim}",
                memory.dim()
            )));
        }
        let router = StaticRouter::new(self.router)?;
        let judge = self.judge.unwrap_or_else(|| self.strong.clone());
        let comparator = Comparator::new(&config, embedder.clone(), Some(judge));
        let seq = memory.next_seq();
        let (pending, _) = watch::channel(0usize);
        Ok(Engine {
            inner: Arc::new(Inner {
                config,
                router,
                weak: self.weak,
                strong: self.strong,
                embedder,
                comparator,
                memory: SharedMemory::new(memory),
                seq: AtomicU64::new(seq),
                guide_ids: IdGenerator::new("guide"),
                mode: AtomicU8::new(self.mode.to_u8()),
                stats: Mutex::new(EngineStats::default()),
                pending,
                shadow_permits: Semaphore::new(self.shadow_parallelism),
            }),
        })
    }
}

struct Inner {
    config: RarConfig,
    router: StaticRouter,
    weak: Arc<dyn FmClient>,
    strong: Arc<dyn FmClient>,
    embedder: Arc<dyn Embedder>,
    comparator: Comparator,
    memory: SharedMemory,
    seq: AtomicU64,
    guide_ids: IdGenerator,
    mode: AtomicU8,
    stats: Mutex<EngineStats>,
    pending: watch::Sender<usize>,
    shadow_permits: Semaphore,
}

/// Work handed to shadow inference after the strong response is served.
struct ShadowJob {
    request: RequestRecord,
    embedding: EmbeddingVector,
    seq: u64,
    strong_text: String,
    /// The request's own `RequiresStrong` entry, when this is its retry.
    retry_of: Option<String>,
    mode: ShadowMode,
}

enum Foreground {
    Served(CompletionResponse),
    Shadow(CompletionResponse, Box<ShadowJob>),
}

/// Decrements the pending-shadow count when dropped, even on panic.
struct PendingGuard(Arc<Inner>);

impl Drop for PendingGuard {
    fn drop(&mut self) {
        self.0.pending.send_modify(|n| *n -= 1);
    }
}

/// Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl Engine {
    pub fn builder(config: RarConfig, weak: Arc<dyn FmClient>, strong: Arc<dyn FmClient>) -> EngineBuilder {
        EngineBuilder {
            config,
            weak,
            strong,
            router: StaticRouterSpec::always_strong(),
            embedder: None,
            judge: None,
            memory: None,
            shadow_parallelism: 4,
            mode: ShadowMode::Full,
        }
    }

    pub fn config(&self) -> &RarConfig {
        &self.inner.config
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        self.inner.embedder.clone()
    }

    pub fn stats(&self) -> EngineStats {
        *self.inner.stats.lock()
    }

    /// Sequence number the next request will receive.
    pub fn next_seq(&self) -> u64 {
        self.inner.seq.load(Ordering::SeqCst)
    }

    pub fn shadow_mode(&self) -> ShadowMode {
        ShadowMode::from_u8(self.inner.mode.load(Ordering::SeqCst))
    }

    /// Applies to requests handled after the call.
    pub fn set_shadow_mode(&self, mode: ShadowMode) {
        self.inner.mode.store(mode.to_u8(), Ordering::SeqCst);
    }

    pub fn memory_snapshot(&self) -> MemoryStore {
        self.inner.memory.snapshot()
    }

    pub fn memory_len(&self) -> usize {
        self.inner.memory.read().len()
    }

    /// Memory in its persistence format.
    pub fn export_memory(&self) -> Vec<u8> {
        self.inner.memory.read().to_bytes()
    }

    pub fn pending_shadows(&self) -> usize {
        *self.inner.pending.borrow()
    }

    /// Serves `request`; any shadow inference runs on a background task.
    /// Must be called from within a tokio runtime.
    pub async fn handle(&self, request: RequestRecord) -> Result<CompletionResponse, EngineError> {
        match self.inner.foreground(request).await? {
            Foreground::Served(resp) => Ok(resp),
            Foreground::Shadow(resp, job) => {
                self.spawn_shadow(job);
                Ok(resp)
            }
        }
    }

    /// Serves `request` and runs its shadow inference to completion before
    /// returning. The response's `case` and `strong_calls_incurred` then
    /// cover the whole request.
    pub async fn handle_and_shadow(
        &self,
        request: RequestRecord,
    ) -> Result<(CompletionResponse, CaseOutcome), EngineError> {
        match self.inner.foreground(request).await? {
            Foreground::Served(resp) => {
                let outcome = CaseOutcome {
                    kind: resp.case.expect("served responses carry a case"),
                    guide_source: resp.guide_id.as_ref().map(|_| GuideSource::FromMemory),
                    strong_calls: resp.strong_calls_incurred,
                };
                Ok((resp, outcome))
            }
            Foreground::Shadow(mut resp, job) => {
                let outcome = self.inner.run_shadow(*job).await?;
                resp.case = Some(outcome.kind);
                resp.strong_calls_incurred = outcome.strong_calls;
                Ok((resp, outcome))
            }
        }
    }

    fn spawn_shadow(&self, job: Box<ShadowJob>) {
        self.inner.pending.send_modify(|n| *n += 1);
        let guard = PendingGuard(self.inner.clone());
        tokio::spawn(async move {
            let inner = guard.0.clone();
            let _permit = inner.shadow_permits.acquire().await.expect("semaphore is never closed");
            // Errors are logged and counted inside run_shadow.
            let _ = inner.run_shadow(*job).await;
            drop(guard);
        });
    }

    /// Waits until no shadow task is queued or running.
    pub async fn quiesce(&self) {
        let mut rx = self.inner.pending.subscribe();
        rx.wait_for(|n| *n == 0)
            .await
            .expect("sender lives as long as the engine");
    }
}

impl Inner {
    fn backend(tier: ModelTier) -> impl FnOnce(FmError) -> EngineError {
        move |source| EngineError::Backend { tier, source }
    }

    async fn call(
        &self,
        tier: ModelTier,
        kind: PromptKind,
        request: &RequestRecord,
        guide: Option<&Guide>,
    ) -> Result<String, EngineError> {
        let client = match tier {
            ModelTier::Weak => &self.weak,
            ModelTier::Strong => {
                self.stats.lock().strong_calls_total += 1;
                &self.strong
            }
        };
        client.complete(kind, request, guide).await.map_err(Self::backend(tier))
    }

    fn fail_request(&self) {
        self.stats.lock().failed_requests += 1;
    }

    async fn foreground(&self, request: RequestRecord) -> Result<Foreground, EngineError> {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let mode = ShadowMode::from_u8(self.mode.load(Ordering::SeqCst));
        let result = self.route_foreground(request, seq, mode).await;
        if result.is_err() {
            self.fail_request();
        }
        let fg = result?;
        let resp = match &fg {
            Foreground::Served(r) | Foreground::Shadow(r, _) => r,
        };
        self.stats.lock().record_served(resp.tier, resp.case);
        Ok(fg)
    }

    async fn route_foreground(
        &self,
        request: RequestRecord,
        seq: u64,
        mode: ShadowMode,
    ) -> Result<Foreground, EngineError> {
        request.validate(self.config.embedding_dim)?;
        let served = |text, tier, case, guide_id, strong_calls| {
            Foreground::Served(CompletionResponse {
                text,
                tier,
                guide_id,
                case: Some(case),
                strong_calls_incurred: strong_calls,
            })
        };

        if self.router.route(&request).await? == ModelTier::Weak {
            let text = self
                .call(ModelTier::Weak, PromptKind::DirectAnswer, &request, None)
                .await?;
            return Ok(served(text, ModelTier::Weak, CaseKind::StaticWeak, None, 0));
        }

        let embedding = match &request.embedding {
            Some(e) => e.clone(),
            None => self.embedder.embed(&request.text).await?,
        };
        let hit = self
            .memory
            .read()
            .query(&embedding, self.config.memory_sim_threshold, None);

        let mut retry_of = None;
        if let Some(hit) = hit {
            let entry = hit.entry;
            match entry.flag {
                EntryFlag::SolvedAlone => {
                    let text = self
                        .call(ModelTier::Weak, PromptKind::DirectAnswer, &request, None)
                        .await?;
                    return Ok(served(text, ModelTier::Weak, CaseKind::MemoryDirectWeak, None, 0));
                }
                EntryFlag::SolvedWithGuide => {
                    let guide = guide_from_entry(&entry);
                    let text = self
                        .call(ModelTier::Weak, PromptKind::GuidedAnswer, &request, Some(&guide))
                        .await?;
                    return Ok(served(
                        text,
                        ModelTier::Weak,
                        CaseKind::MemoryGuidedWeak,
                        Some(entry.id),
                        0,
                    ));
                }
                EntryFlag::RequiresStrong => {
                    let retry_at = entry.retry_at_seq.unwrap_or(0);
                    if seq < retry_at {
                        let text = self
                            .call(ModelTier::Strong, PromptKind::DirectAnswer, &request, None)
                            .await?;
                        return Ok(served(text, ModelTier::Strong, CaseKind::MemoryForcedStrong, None, 1));
                    }
                    if entry.request_text == request.text {
                        retry_of = Some(entry.id);
                    }
                }
            }
        }

        let strong_text = self
            .call(ModelTier::Strong, PromptKind::DirectAnswer, &request, None)
            .await?;
        let resp = CompletionResponse {
            text: strong_text.clone(),
            tier: ModelTier::Strong,
            guide_id: None,
            case: None,
            strong_calls_incurred: 1,
        };
        let job = Box::new(ShadowJob {
            request,
            embedding,
            seq,
            strong_text,
            retry_of,
            mode,
        });
        Ok(Foreground::Shadow(resp, job))
    }

    async fn run_shadow(&self, job: ShadowJob) -> Result<CaseOutcome, EngineError> {
        let id = job.request.id.clone();
        let result = self.shadow_infer(job).await;
        match &result {
            Ok(outcome) => self.stats.lock().record_shadow(outcome),
            Err(e) => {
                tracing::warn!(request = %id, error = %e, "shadow inference aborted");
                self.stats.lock().shadow_failed += 1;
            }
        }
        result
    }

    /// Whether `candidate` (weak output) aligns with the strong response.
    /// An unparseable weak answer counts as not aligned.
    async fn aligned(&self, candidate: &str, job: &ShadowJob) -> Result<bool, EngineError> {
        let choices = job.request.choices.as_deref();
        match self.comparator.compare(candidate, &job.strong_text, choices).await {
            Ok(v) => Ok(v.similar),
            Err(SidedCompareError {
                side: Some(Side::First),
                source: CompareError::ChoiceExtraction(_),
            }) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    async fn shadow_infer(&self, job: ShadowJob) -> Result<CaseOutcome, EngineError> {
        let mut strong_calls = 1;
        let outcome = |kind, guide_source, strong_calls| CaseOutcome {
            kind,
            guide_source,
            strong_calls,
        };

        let weak_text = self
            .call(ModelTier::Weak, PromptKind::DirectAnswer, &job.request, None)
            .await?;
        if self.aligned(&weak_text, &job).await? {
            self.record(&job, EntryFlag::SolvedAlone, None)?;
            return Ok(outcome(CaseKind::Case1SolvedAlone, None, strong_calls));
        }
        if job.mode == ShadowMode::ProfileOnly {
            return Ok(outcome(CaseKind::ProfileUnsolved, None, strong_calls));
        }

        let stored = self.memory.read().query(
            &job.embedding,
            self.config.memory_sim_threshold,
            Some(&[EntryFlag::SolvedWithGuide]),
        );
        if let Some(hit) = stored {
            let guide = guide_from_entry(&hit.entry);
            let guided = self
                .call(ModelTier::Weak, PromptKind::GuidedAnswer, &job.request, Some(&guide))
                .await?;
            if self.aligned(&guided, &job).await? {
                self.record(&job, EntryFlag::SolvedWithGuide, Some(guide.text))?;
                return Ok(outcome(
                    CaseKind::Case2SolvedWithGuide,
                    Some(GuideSource::FromMemory),
                    strong_calls,
                ));
            }
        }

        let fresh_budget = if job.mode == ShadowMode::ReuseOnly || job.retry_of.is_some() {
            0
        } else {
            self.config.max_fresh_guides
        };
        for _ in 0..fresh_budget {
            strong_calls += 1;
            let text = self
                .call(ModelTier::Strong, PromptKind::GuideGeneration, &job.request, None)
                .await?;
            if text.trim().is_empty() {
                continue;
            }
            let guide = Guide {
                id: self.guide_ids.next_id(),
                text,
                origin_request_id: job.request.id.clone(),
                source: GuideSource::FreshFromStrong,
                domain: job.request.domain.clone(),
            };
            let guided = self
                .call(ModelTier::Weak, PromptKind::GuidedAnswer, &job.request, Some(&guide))
                .await?;
            if self.aligned(&guided, &job).await? {
                self.record(&job, EntryFlag::SolvedWithGuide, Some(guide.text))?;
                return Ok(outcome(
                    CaseKind::Case2SolvedWithGuide,
                    Some(GuideSource::FreshFromStrong),
                    strong_calls,
                ));
            }
        }

        self.record(&job, EntryFlag::RequiresStrong, None)?;
        Ok(outcome(CaseKind::Case3Failed, None, strong_calls))
    }

    /// Writes a shadow result to memory. Retries update the request's own
    /// entry in place; everything else inserts (with dedup).
    fn record(&self, job: &ShadowJob, flag: EntryFlag, guide_text: Option<String>) -> Result<(), EngineError> {
        if job.mode == ShadowMode::ReuseOnly {
            return Ok(());
        }
        let retry_period = self.config.retry_period;
        let mut memory = self.memory.write();
        if let Some(id) = job.retry_of.as_deref().filter(|id| memory.get(id).is_some()) {
            match flag {
                EntryFlag::RequiresStrong => {
                    let created = memory.get(id).map_or(0, |e| e.created_seq);
                    let retry_at = (job.seq + retry_period).max(created + 1);
                    memory.mark_requires_strong(id, retry_at)?;
                }
                _ => {
                    memory.mark_solved(id, guide_text)?;
                }
            }
            return Ok(());
        }
        // Concurrent shadow tasks may finish out of order; created_seq must
        // still increase strictly.
        let created_seq = job.seq.max(memory.next_seq());
        let entry = MemoryEntry {
            id: memory.fresh_id(),
            embedding: job.embedding.clone(),
            request_text: job.request.text.clone(),
            flag,
            guide_text,
            domain: job.request.domain.clone(),
            created_seq,
            retry_at_seq: (flag == EntryFlag::RequiresStrong).then(|| (job.seq + retry_period).max(created_seq + 1)),
        };
        memory.insert(entry)?;
        Ok(())
    }
}

fn guide_from_entry(entry: &MemoryEntry) -> Guide {
    Guide {
        id: entry.id.clone(),
        text: entry.guide_text.clone().unwrap_or_default(),
        origin_request_id: entry.id.clone(),
        source: GuideSource::FromMemory,
        domain: entry.domain.clone(),
    }
}
