//! Staged, shuffled experiment runs of the engine against baselines.
//!
//! Every shuffle gets a fresh engine and fresh backends and visits the items
//! in the same permuted order at every stage. Baselines replay the same
//! permutations so comparisons are paired. Shuffles run on separate threads;
//! within a shuffle each request is served and its shadow inference finished
//! before the next one starts, so results do not depend on scheduling.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::DatasetItem;
use super::rng::permutation;
use super::stats::{chi_square_2x2, ChiSquare};
use crate::backends::{AnswerKey, FmClient, FmError, PromptKind};
use crate::compare::extract_choice;
use crate::deploy::{BackendFactory, Backends, DeployError};
use crate::engine::{Engine, EngineError, EngineStats, ShadowMode, StaticRouter, StaticRouterSpec};
use crate::memory::{EntryFlag, MemoryStore};
use crate::model::{ComparatorStrategy, ConfigError, ModelTier, RarConfig};

pub const RAR_ARM: &str = "rar";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Weak,
    Strong,
    Cot,
    Oracle,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Weak, Baseline::Strong, Baseline::Cot, Baseline::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Weak => "weak",
            Baseline::Strong => "strong",
            Baseline::Cot => "cot",
            Baseline::Oracle => "oracle",
        }
    }
}

fn engine_defaults() -> RarConfig {
    RarConfig {
        comparator_strategy: ComparatorStrategy::ExactChoice,
        ..RarConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "engine_defaults")]
    pub engine: RarConfig,
    pub shuffles: u32,
    pub stages: u32,
    pub seed: u64,
    pub baselines: Vec<Baseline>,
    /// Stage 1 only records what the weak model solves alone; guides are
    /// sought from stage 2 on.
    pub profiling_stage: bool,
    /// Memory threshold used by cross-domain runs.
    pub cross_domain_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            engine: engine_defaults(),
            shuffles: 5,
            stages: 5,
            seed: 0,
            baselines: Baseline::ALL.to_vec(),
            profiling_stage: true,
            cross_domain_threshold: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(mut self) -> Result<Self, ExperimentError> {
        self.engine = self.engine.validate()?;
        if self.shuffles == 0 || self.stages == 0 {
            return Err(ExperimentError::Config("shuffles and stages must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_domain_threshold) {
            return Err(ExperimentError::Config(
                "cross_domain_threshold must be in [0, 1]".into(),
            ));
        }
        self.baselines = self
            .baselines
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str::<Self>(text)
            .map_err(|e| ExperimentError::Config(e.to_string()))?
            .validate()
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    EngineConfig(#[from] ConfigError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Backend(#[from] FmError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("reference answer for {id}: {message}")]
    Reference { id: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMetrics {
    /// 1-based.
    pub stage_index: u32,
    pub samples: u64,
    /// Served responses whose extracted label equals the reference.
    pub aligned: u64,
    /// Requests the weak model served aligned, or that shadow inference
    /// showed it could have served.
    pub weak_aligned: u64,
    /// Strong-model invocations, foreground and shadow.
    pub strong_calls: u64,
    pub strong_served: u64,
    /// Aligned guided answers whose guide came from memory, served or in
    /// shadow inference.
    pub guides_from_memory: u64,
    pub guides_fresh: u64,
    pub case1: u64,
    pub case2: u64,
    pub case3: u64,
    pub profile_unsolved: u64,
    pub static_weak: u64,
    pub memory_direct: u64,
    pub memory_guided: u64,
    pub memory_forced: u64,
}

impl StageMetrics {
    fn new(stage_index: u32) -> Self {
        Self {
            stage_index,
            ..Self::default()
        }
    }

    fn add_engine_item(&mut self, tier: ModelTier, aligned: bool, d: &EngineStats) {
        self.samples += 1;
        self.aligned += u64::from(aligned);
        self.strong_calls += d.strong_calls_total;
        self.strong_served += u64::from(tier == ModelTier::Strong);
        let guided_hit = d.memory_guided > 0 && aligned;
        self.guides_from_memory += d.guides_from_memory + u64::from(guided_hit);
        self.guides_fresh += d.guides_fresh;
        self.case1 += d.case1_count;
        self.case2 += d.case2_count;
        self.case3 += d.case3_count;
        self.profile_unsolved += d.profile_unsolved_count;
        self.static_weak += d.static_weak;
        self.memory_direct += d.memory_direct;
        self.memory_guided += d.memory_guided;
        self.memory_forced += d.memory_forced;
        let weak_ok = (tier == ModelTier::Weak && aligned) || d.case1_count + d.case2_count > 0;
        self.weak_aligned += u64::from(weak_ok);
    }

    fn add_static_item(&mut self, tier: ModelTier, aligned: bool) {
        self.samples += 1;
        self.aligned += u64::from(aligned);
        match tier {
            ModelTier::Weak => self.weak_aligned += u64::from(aligned),
            ModelTier::Strong => {
                self.strong_calls += 1;
                self.strong_served += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    /// `shuffles[s][t]`: shuffle `s`, stage `t`.
    pub shuffles: Vec<Vec<StageMetrics>>,
    pub cumulative_aligned: Vec<Vec<u64>>,
    pub cumulative_strong_calls: Vec<Vec<u64>>,
}

fn prefix_sums(values: impl Iterator<Item = u64>) -> Vec<u64> {
    values
        .scan(0u64, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

impl ArmReport {
    fn new(name: &str, shuffles: Vec<Vec<StageMetrics>>) -> Self {
        let cumulative = |f: fn(&StageMetrics) -> u64| {
            shuffles
                .iter()
                .map(|stages| prefix_sums(stages.iter().map(f)))
                .collect()
        };
        Self {
            name: name.to_string(),
            cumulative_aligned: cumulative(|m| m.aligned),
            cumulative_strong_calls: cumulative(|m| m.strong_calls),
            shuffles,
        }
    }

    /// Sum of `f` over every shuffle and stage.
    pub fn total(&self, f: impl Fn(&StageMetrics) -> u64) -> u64 {
        self.shuffles.iter().flatten().map(f).sum()
    }

    /// Sum of `f` over shuffles, per stage.
    pub fn per_stage_total(&self, f: impl Fn(&StageMetrics) -> u64) -> Vec<u64> {
        let stages = self.shuffles.iter().map(Vec::len).max().unwrap_or(0);
        (0..stages)
            .map(|t| self.shuffles.iter().filter_map(|s| s.get(t)).map(&f).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareEntry {
    pub baseline: String,
    pub metric: String,
    /// `[rar_yes, rar_no, baseline_yes, baseline_no]`.
    pub table: [u64; 4],
    /// `None` when the table has a zero marginal.
    pub result: Option<ChiSquare>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossDomainSummary {
    /// Per stage, summed over shuffles.
    pub rar_weak_aligned: Vec<u64>,
    pub baseline_aligned: Vec<u64>,
    pub deltas: Vec<i64>,
    pub memory_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub shuffles: u32,
    pub stages: u32,
    pub items: usize,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmReport>,
    pub chi_square: Vec<ChiSquareEntry>,
    pub valid: bool,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_domain: Option<CrossDomainSummary>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Report plus the engine memory each shuffle ended with.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub memories: Vec<MemoryStore>,
}

/// Items the weak model answers incorrectly. Answers without an extractable
/// label count as incorrect.
pub async fn profile_failing_subset(items: &[DatasetItem], weak: &dyn FmClient) -> Result<Vec<DatasetItem>, FmError> {
    let mut failing = Vec::new();
    for item in items {
        let text = weak
            .complete(PromptKind::DirectAnswer, &item.to_request(), None)
            .await?;
        if extract_choice(&text, &item.choices).ok() != Some(item.answer_label) {
            failing.push(item.clone());
        }
    }
    Ok(failing)
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("failed to start tokio runtime")
}

fn answer_key(items: &[DatasetItem]) -> Result<AnswerKey, ExperimentError> {
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(ExperimentError::Dataset(format!("duplicate id {}", item.id)));
        }
    }
    Ok(Arc::new(items.iter().map(|i| (i.id.clone(), i.answer_label)).collect()))
}

/// Reference labels from one strong pass, not counted in any arm.
async fn reference_labels(items: &[DatasetItem], strong: &dyn FmClient) -> Result<Vec<char>, ExperimentError> {
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        let text = strong
            .complete(PromptKind::DirectAnswer, &item.to_request(), None)
            .await?;
        let label = extract_choice(&text, &item.choices).map_err(|e| ExperimentError::Reference {
            id: item.id.clone(),
            message: e.to_string(),
        })?;
        labels.push(label);
    }
    Ok(labels)
}

fn is_aligned(text: &str, item: &DatasetItem, reference: char) -> bool {
    extract_choice(text, &item.choices).ok() == Some(reference)
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    items: &'a [DatasetItem],
    refs: &'a [char],
}

/// Stages completed before a failure, plus the failure.
struct Partial<T> {
    value: T,
    error: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RarMode {
    Standard,
    CrossDomain,
}

async fn run_rar(
    sh: &Shared<'_>,
    backends: &Backends,
    order: &[usize],
    mode: RarMode,
    memory: Option<MemoryStore>,
) -> Partial<(Vec<StageMetrics>, Option<MemoryStore>)> {
    let mut config = sh.cfg.engine.clone();
    if mode == RarMode::CrossDomain {
        config.memory_sim_threshold = sh.cfg.cross_domain_threshold;
    }
    let mut builder = Engine::builder(config, backends.weak.clone(), backends.strong.clone())
        .embedder(backends.embedder.clone())
        .shadow_parallelism(1);
    if let Some(memory) = memory {
        builder = builder.memory(memory);
    }
    let engine = match builder.build() {
        Ok(e) => e,
        Err(e) => {
            return Partial {
                value: (Vec::new(), None),
                error: Some(e.to_string()),
            }
        }
    };

    let mut stages = Vec::new();
    for t in 0..sh.cfg.stages {
        let shadow_mode = match mode {
            RarMode::CrossDomain => ShadowMode::ReuseOnly,
            RarMode::Standard if t == 0 && sh.cfg.profiling_stage => ShadowMode::ProfileOnly,
            RarMode::Standard => ShadowMode::Full,
        };
        engine.set_shadow_mode(shadow_mode);
        let mut m = StageMetrics::new(t + 1);
        for &i in order {
            let item = &sh.items[i];
            let before = engine.stats();
            match engine.handle_and_shadow(item.to_request()).await {
                Ok((resp, _)) => {
                    let delta = engine.stats().since(&before);
                    m.add_engine_item(resp.tier, is_aligned(&resp.text, item, sh.refs[i]), &delta);
                }
                Err(e) => {
                    stages.push(m);
                    return Partial {
                        value: (stages, Some(engine.memory_snapshot())),
                        error: Some(format!("request {}: {e}", item.id)),
                    };
                }
            }
        }
        stages.push(m);
    }
    Partial {
        value: (stages, Some(engine.memory_snapshot())),
        error: None,
    }
}

async fn run_baseline(
    sh: &Shared<'_>,
    backends: &Backends,
    order: &[usize],
    baseline: Baseline,
) -> Partial<Vec<StageMetrics>> {
    let mut stages = Vec::new();
    let result: Result<(), FmError> = async {
        let router = match baseline {
            Baseline::Oracle => {
                // Profile: what the weak model solved in stage 1 of the same permutation.
                let mut solved = BTreeSet::new();
                for &i in order {
                    let item = &sh.items[i];
                    let text = backends
                        .weak
                        .complete(PromptKind::DirectAnswer, &item.to_request(), None)
                        .await?;
                    if is_aligned(&text, item, sh.refs[i]) {
                        solved.insert(item.id.clone());
                    }
                }
                Some(StaticRouter::new(StaticRouterSpec::oracle(solved)).expect("oracle spec is valid"))
            }
            _ => None,
        };
        for t in 0..sh.cfg.stages {
            let mut m = StageMetrics::new(t + 1);
            for &i in order {
                let item = &sh.items[i];
                let request = item.to_request();
                let (tier, kind) = match baseline {
                    Baseline::Weak => (ModelTier::Weak, PromptKind::DirectAnswer),
                    Baseline::Strong => (ModelTier::Strong, PromptKind::DirectAnswer),
                    Baseline::Cot => (ModelTier::Weak, PromptKind::ZeroShotCot),
                    Baseline::Oracle => {
                        let router = router.as_ref().expect("built above");
                        let tier = router.route(&request).await.expect("oracle routing is local");
                        (tier, PromptKind::DirectAnswer)
                    }
                };
                let client = match tier {
                    ModelTier::Weak => &backends.weak,
                    ModelTier::Strong => &backends.strong,
                };
                let text = match client.complete(kind, &request, None).await {
                    Ok(text) => text,
                    Err(e) => {
                        stages.push(std::mem::take(&mut m));
                        return Err(e);
                    }
                };
                m.add_static_item(tier, is_aligned(&text, item, sh.refs[i]));
            }
            stages.push(m);
        }
        Ok(())
    }
    .await;
    Partial {
        value: stages,
        error: result.err().map(|e| format!("{} baseline: {e}", baseline.name())),
    }
}

struct ShuffleResult {
    arms: Vec<Vec<StageMetrics>>,
    memory: Option<MemoryStore>,
    error: Option<String>,
}

fn run_shuffle(
    sh: &Shared<'_>,
    factory: &dyn BackendFactory,
    answers: &AnswerKey,
    shuffle: u32,
    mode: RarMode,
    memory: Option<&MemoryStore>,
) -> ShuffleResult {
    let order = permutation(sh.cfg.seed, u64::from(shuffle), sh.items.len());
    let backends = match factory.backends(sh.cfg.engine.embedding_dim, Some(answers.clone())) {
        Ok(b) => b,
        Err(e) => {
            return ShuffleResult {
                arms: Vec::new(),
                memory: None,
                error: Some(e.to_string()),
            }
        }
    };
    let baselines: Vec<Baseline> = match mode {
        RarMode::Standard => sh.cfg.baselines.clone(),
        RarMode::CrossDomain => vec![Baseline::Weak],
    };
    runtime().block_on(async {
        let rar = run_rar(sh, &backends, &order, mode, memory.cloned()).await;
        let (stages, memory) = rar.value;
        let mut arms = vec![stages];
        let mut error = rar.error;
        for b in baselines {
            let partial = run_baseline(sh, &backends, &order, b).await;
            arms.push(partial.value);
            error = error.or(partial.error);
        }
        ShuffleResult { arms, memory, error }
    })
}

fn chi_square_entries(rar: &ArmReport, baselines: &[ArmReport]) -> Vec<ChiSquareEntry> {
    type Metric = fn(&StageMetrics) -> u64;
    let metrics: [(&str, Metric); 2] = [("aligned", |m| m.aligned), ("strong_served", |m| m.strong_served)];
    let mut out = Vec::new();
    for base in baselines {
        for (metric, f) in metrics {
            let (ry, rn) = (rar.total(f), rar.total(|m| m.samples) - rar.total(f));
            let (by, bn) = (base.total(f), base.total(|m| m.samples) - base.total(f));
            out.push(ChiSquareEntry {
                baseline: base.name.clone(),
                metric: metric.to_string(),
                table: [ry, rn, by, bn],
                result: chi_square_2x2(ry, rn, by, bn).ok(),
            });
        }
    }
    out
}

fn execute(
    cfg: &ExperimentConfig,
    items: &[DatasetItem],
    factory: &dyn BackendFactory,
    mode: RarMode,
    memory: Option<&MemoryStore>,
) -> Result<ExperimentOutput, ExperimentError> {
    let cfg = cfg.clone().validate()?;
    let answers = answer_key(items)?;
    // Runtimes live on scoped threads so callers may be async themselves.
    let refs = std::thread::scope(|s| {
        s.spawn(|| -> Result<Vec<char>, ExperimentError> {
            let backends = factory.backends(cfg.engine.embedding_dim, Some(answers.clone()))?;
            runtime().block_on(reference_labels(items, backends.strong.as_ref()))
        })
        .join()
        .expect("reference pass panicked")
    })?;

    let sh = Shared {
        cfg: &cfg,
        items,
        refs: &refs,
    };
    let results: Vec<ShuffleResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.shuffles)
            .map(|k| {
                let (sh, answers) = (&sh, &answers);
                s.spawn(move || run_shuffle(sh, factory, answers, k, mode, memory))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shuffle panicked"))
            .collect()
    });

    let mut names = vec![RAR_ARM.to_string()];
    match mode {
        RarMode::Standard => names.extend(cfg.baselines.iter().map(|b| b.name().to_string())),
        RarMode::CrossDomain => names.push(Baseline::Weak.name().to_string()),
    }
    let mut per_arm: Vec<Vec<Vec<StageMetrics>>> = vec![Vec::new(); names.len()];
    let mut error = None;
    let mut memories = Vec::new();
    for r in results {
        for (slot, stages) in per_arm.iter_mut().zip(r.arms) {
            slot.push(stages);
        }
        memories.extend(r.memory);
        error = error.or(r.error);
    }
    let arms: Vec<ArmReport> = names
        .iter()
        .zip(per_arm)
        .map(|(name, shuffles)| ArmReport::new(name, shuffles))
        .collect();

    let chi_square = match mode {
        RarMode::Standard => chi_square_entries(&arms[0], &arms[1..]),
        RarMode::CrossDomain => Vec::new(),
    };
    let cross_domain = (mode == RarMode::CrossDomain).then(|| {
        let rar = arms[0].per_stage_total(|m| m.weak_aligned);
        let base = arms[1].per_stage_total(|m| m.aligned);
        let deltas = rar.iter().zip(&base).map(|(&r, &b)| r as i64 - b as i64).collect();
        CrossDomainSummary {
            rar_weak_aligned: rar,
            baseline_aligned: base,
            deltas,
            memory_entries: memory.map_or(0, MemoryStore::len),
        }
    });

    Ok(ExperimentOutput {
        report: ExperimentReport {
            seed: cfg.seed,
            shuffles: cfg.shuffles,
            stages: cfg.stages,
            items: items.len(),
            valid: error.is_none(),
            error,
            config: cfg,
            arms,
            chi_square,
            cross_domain,
        },
        memories,
    })
}

/// Runs the engine and the configured baselines. Backend failures stop the
/// affected shuffle and yield a report marked invalid.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    items: &[DatasetItem],
    factory: &dyn BackendFactory,
) -> Result<ExperimentOutput, ExperimentError> {
    execute(cfg, items, factory, RarMode::Standard, None)
}

/// Replays `items` against a fixed guide memory: only stored guides may be
/// used, nothing is written back, and lookups use the cross-domain
/// threshold. The `rar` arm's `weak_aligned` is compared with the weak
/// baseline.
pub fn run_cross_domain(
    cfg: &ExperimentConfig,
    guide_memory: &MemoryStore,
    items: &[DatasetItem],
    factory: &dyn BackendFactory,
) -> Result<ExperimentOutput, ExperimentError> {
    if guide_memory.dim() != cfg.engine.embedding_dim {
        return Err(ExperimentError::Config(format!(
            "memory dimension {} != configured {}",
            guide_memory.dim(),
            cfg.engine.embedding_dim
        )));
    }
    let guides = guide_memory.retain(|e| e.flag == EntryFlag::SolvedWithGuide);
    execute(cfg, items, factory, RarMode::CrossDomain, Some(&guides))
}
