use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use proptest::prelude::*;
use rar_core::backends::{draw1, CountingClient, FmClient, FmError, PromptKind, SyntheticFm, SyntheticProfile};
use rar_core::engine::{static_route, Engine, EngineError, ShadowMode, StaticRouterSpec};
use rar_core::memory::{EntryFlag, MemoryStore};
use rar_core::model::{CaseKind, ComparatorStrategy, Guide, GuideSource, ModelTier, RarConfig, RequestRecord};

const SEED: u64 = 11;

fn profile(p_alone: f64, p_guided: f64) -> SyntheticProfile {
    SyntheticProfile {
        seed: SEED,
        p_alone,
        p_guided,
        domain_strict: true,
    }
}

fn config(retry_period: u64) -> RarConfig {
    RarConfig {
        embedding_dim: 128,
        comparator_strategy: ComparatorStrategy::ExactChoice,
        retry_period,
        ..RarConfig::default()
    }
}

/// First id `item-N` whose draw falls in `[lo, hi)`.
fn id_with_draw(lo: f64, hi: f64) -> String {
    (0..)
        .map(|n| format!("item-{n}"))
        .find(|id| (lo..hi).contains(&draw1(SEED, id)))
        .unwrap()
}

fn request(id: &str) -> RequestRecord {
    RequestRecord::new(id, format!("question text for {id} about tides and moons"))
        .with_domain("physics")
        .with_choices(["one", "two", "three", "four"])
}

struct Rig {
    engine: Engine,
    strong: Arc<CountingClient>,
    weak: Arc<CountingClient>,
}

fn rig(p: SyntheticProfile, cfg: RarConfig, router: StaticRouterSpec) -> Rig {
    let weak = Arc::new(CountingClient::new(Arc::new(SyntheticFm::new(
        ModelTier::Weak,
        p.clone(),
    ))));
    let strong = Arc::new(CountingClient::new(Arc::new(SyntheticFm::new(ModelTier::Strong, p))));
    let engine = Engine::builder(cfg, weak.clone(), strong.clone())
        .router(router)
        .build()
        .unwrap();
    Rig { engine, strong, weak }
}

#[tokio::test]
async fn static_router_kinds() {
    let r = request("a");
    assert_eq!(
        static_route(&StaticRouterSpec::always_strong(), &r).await.unwrap(),
        ModelTier::Strong
    );
    assert_eq!(
        static_route(&StaticRouterSpec::always_weak(), &r).await.unwrap(),
        ModelTier::Weak
    );
    let set: BTreeSet<String> = ["a".to_string()].into();
    let oracle = StaticRouterSpec::oracle(set);
    assert_eq!(static_route(&oracle, &r).await.unwrap(), ModelTier::Weak);
    assert_eq!(static_route(&oracle, &request("b")).await.unwrap(), ModelTier::Strong);
    let mut broken = StaticRouterSpec::always_strong();
    broken.kind = rar_core::engine::StaticRouterKind::OracleProfile;
    assert!(static_route(&broken, &r).await.is_err());
}

#[tokio::test]
async fn always_weak_router_never_calls_strong() {
    let rig = rig(profile(0.0, 0.0), config(10), StaticRouterSpec::always_weak());
    let resp = rig.engine.handle(request("x")).await.unwrap();
    rig.engine.quiesce().await;
    assert_eq!(resp.tier, ModelTier::Weak);
    assert_eq!(resp.case, Some(CaseKind::StaticWeak));
    assert_eq!(resp.strong_calls_incurred, 0);
    assert_eq!(rig.strong.calls(), 0);
    assert_eq!(rig.engine.memory_len(), 0);
}

#[tokio::test]
async fn strong_path_returns_strong_text_and_fills_memory() {
    let rig = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    let req = request(&id_with_draw(0.9, 1.0));
    let direct = SyntheticFm::new(ModelTier::Strong, profile(0.2, 0.4))
        .complete(PromptKind::DirectAnswer, &req, None)
        .await
        .unwrap();
    let resp = rig.engine.handle(req).await.unwrap();
    assert_eq!(resp.text, direct);
    assert_eq!(resp.tier, ModelTier::Strong);
    rig.engine.quiesce().await;
    assert_eq!(rig.engine.pending_shadows(), 0);
    assert!(rig.engine.memory_len() >= 1);
    assert_eq!(rig.engine.stats().shadow_completed, 1);
}

#[tokio::test]
async fn case1_costs_one_strong_call_and_converges() {
    let rig = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    let req = request(&id_with_draw(0.0, 0.2));
    let (resp, outcome) = rig.engine.handle_and_shadow(req.clone()).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::Case1SolvedAlone);
    assert_eq!(outcome.strong_calls, 1);
    assert_eq!(resp.strong_calls_incurred, 1);
    assert_eq!(rig.strong.calls(), 1);

    let (resp, outcome) = rig.engine.handle_and_shadow(req).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::MemoryDirectWeak);
    assert_eq!(resp.tier, ModelTier::Weak);
    assert_eq!(outcome.strong_calls, 0);
    assert_eq!(rig.strong.calls(), 1);
}

#[tokio::test]
async fn case2_fresh_guide_costs_two_strong_calls() {
    let rig = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    let req = request(&id_with_draw(0.2, 0.6));
    let (_, outcome) = rig.engine.handle_and_shadow(req.clone()).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::Case2SolvedWithGuide);
    assert_eq!(outcome.guide_source, Some(GuideSource::FreshFromStrong));
    assert_eq!(outcome.strong_calls, 2);
    assert_eq!(rig.strong.calls(), 2);
    let entry = rig.engine.memory_snapshot().entries()[0].clone();
    assert_eq!(entry.flag, EntryFlag::SolvedWithGuide);
    assert!(entry.guide_text.is_some());

    // The repeat is served by the weak model with the stored guide.
    let (resp, outcome) = rig.engine.handle_and_shadow(req).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::MemoryGuidedWeak);
    assert_eq!(outcome.guide_source, Some(GuideSource::FromMemory));
    assert_eq!(resp.guide_id.as_deref(), Some(entry.id.as_str()));
    assert_eq!(rig.strong.calls(), 2);
}

#[tokio::test]
async fn retry_reuses_a_stored_guide_and_flips_the_row() {
    let rig = rig(profile(0.0, 0.5), config(1), StaticRouterSpec::always_strong());
    let text = "which force keeps the moon in orbit around the earth";
    let hard = RequestRecord::new(id_with_draw(0.5, 1.0), text)
        .with_domain("physics")
        .with_choices(["one", "two", "three", "four"]);
    let (_, outcome) = rig.engine.handle_and_shadow(hard).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::Case3Failed);

    // A near-identical question gets a fresh guide.
    let mut near = request(&id_with_draw(0.0, 0.5));
    near.text = format!("{text}?");
    let (_, outcome) = rig.engine.handle_and_shadow(near).await.unwrap();
    assert_eq!(outcome.guide_source, Some(GuideSource::FreshFromStrong));

    // Same text as the failed row, from a guidable item: the retry tries the
    // stored guide only, succeeds, and updates the row in place.
    let mut same = request(
        &(0..)
            .map(|n| format!("alt-{n}"))
            .find(|id| draw1(SEED, id) < 0.5)
            .unwrap(),
    );
    same.text = text.to_string();
    let before = rig.strong.calls();
    let (_, outcome) = rig.engine.handle_and_shadow(same).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::Case2SolvedWithGuide);
    assert_eq!(outcome.guide_source, Some(GuideSource::FromMemory));
    assert_eq!(outcome.strong_calls, 1);
    assert_eq!(rig.strong.calls() - before, 1);
    let mem = rig.engine.memory_snapshot();
    assert_eq!(mem.len(), 2);
    assert_eq!(mem.entries()[0].flag, EntryFlag::SolvedWithGuide);
    assert_eq!(mem.entries()[0].retry_at_seq, None);
}

#[tokio::test]
async fn case3_exhausts_k_guides() {
    let cfg = RarConfig {
        max_fresh_guides: 3,
        ..config(10)
    };
    let rig = rig(profile(0.0, 0.0), cfg, StaticRouterSpec::always_strong());
    let seq = rig.engine.next_seq();
    let (_, outcome) = rig.engine.handle_and_shadow(request("hard")).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::Case3Failed);
    assert_eq!(outcome.strong_calls, 1 + 3);
    assert_eq!(rig.strong.calls(), 4);
    let mem = rig.engine.memory_snapshot();
    assert_eq!(mem.len(), 1);
    assert_eq!(mem.entries()[0].flag, EntryFlag::RequiresStrong);
    assert_eq!(mem.entries()[0].retry_at_seq, Some(seq + 10));
}

#[tokio::test]
async fn case3_gates_until_retry_point() {
    let r = 10;
    let rig = rig(profile(0.0, 0.0), config(r), StaticRouterSpec::always_strong());
    let req = request("gated");
    let (_, first) = rig.engine.handle_and_shadow(req.clone()).await.unwrap();
    assert_eq!(first.kind, CaseKind::Case3Failed);
    for _ in 1..r {
        let before = rig.strong.calls();
        let shadows = rig.engine.stats().shadow_completed;
        let (resp, outcome) = rig.engine.handle_and_shadow(req.clone()).await.unwrap();
        assert_eq!(outcome.kind, CaseKind::MemoryForcedStrong);
        assert_eq!(resp.tier, ModelTier::Strong);
        assert_eq!(rig.strong.calls() - before, 1);
        assert_eq!(rig.engine.stats().shadow_completed, shadows);
    }
    let shadows = rig.engine.stats().shadow_completed;
    let (_, retry) = rig.engine.handle_and_shadow(req.clone()).await.unwrap();
    assert_eq!(retry.kind, CaseKind::Case3Failed);
    assert_eq!(rig.engine.stats().shadow_completed, shadows + 1);
    // The retry updated the original row instead of adding one.
    let mem = rig.engine.memory_snapshot();
    assert_eq!(mem.len(), 1);
    assert_eq!(mem.entries()[0].retry_at_seq, Some(r + r));
}

#[tokio::test]
async fn profile_only_mode_records_only_successes() {
    let rig = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    rig.engine.set_shadow_mode(ShadowMode::ProfileOnly);
    let (_, miss) = rig
        .engine
        .handle_and_shadow(request(&id_with_draw(0.2, 0.6)))
        .await
        .unwrap();
    assert_eq!(miss.kind, CaseKind::ProfileUnsolved);
    assert_eq!(miss.strong_calls, 1);
    assert_eq!(rig.engine.memory_len(), 0);
    let (_, hit) = rig
        .engine
        .handle_and_shadow(request(&id_with_draw(0.0, 0.2)))
        .await
        .unwrap();
    assert_eq!(hit.kind, CaseKind::Case1SolvedAlone);
    assert_eq!(rig.engine.memory_len(), 1);
}

#[tokio::test]
async fn reuse_only_mode_never_writes() {
    let rig = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    rig.engine.set_shadow_mode(ShadowMode::ReuseOnly);
    for id in [id_with_draw(0.0, 0.2), id_with_draw(0.2, 0.6), id_with_draw(0.6, 1.0)] {
        let (_, outcome) = rig.engine.handle_and_shadow(request(&id)).await.unwrap();
        assert_eq!(outcome.strong_calls, 1, "{outcome:?}");
    }
    assert_eq!(rig.engine.memory_len(), 0);
}

#[tokio::test]
async fn memory_loaded_at_start_is_used_and_seq_resumes() {
    let first = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    let req = request(&id_with_draw(0.0, 0.2));
    first.engine.handle_and_shadow(req.clone()).await.unwrap();
    let bytes = first.engine.export_memory();
    let loaded = MemoryStore::read_from(128, bytes.as_slice()).unwrap();

    let weak: Arc<dyn FmClient> = Arc::new(SyntheticFm::new(ModelTier::Weak, profile(0.2, 0.4)));
    let strong = Arc::new(CountingClient::new(Arc::new(SyntheticFm::new(
        ModelTier::Strong,
        profile(0.2, 0.4),
    ))));
    let engine = Engine::builder(config(10), weak, strong.clone())
        .memory(loaded)
        .build()
        .unwrap();
    assert_eq!(engine.next_seq(), 1);
    let (resp, outcome) = engine.handle_and_shadow(req).await.unwrap();
    assert_eq!(outcome.kind, CaseKind::MemoryDirectWeak);
    assert_eq!(resp.strong_calls_incurred, 0);
    assert_eq!(strong.calls(), 0);
}

/// Fails every call while `down` is set.
struct Flaky {
    inner: SyntheticFm,
    down: AtomicBool,
}

#[async_trait]
impl FmClient for Flaky {
    fn tier(&self) -> ModelTier {
        self.inner.tier()
    }

    async fn complete(
        &self,
        kind: PromptKind,
        request: &RequestRecord,
        guide: Option<&Guide>,
    ) -> Result<String, FmError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(FmError::Transport {
                tier: self.inner.tier(),
                message: "connection refused".into(),
            });
        }
        self.inner.complete(kind, request, guide).await
    }
}

#[tokio::test]
async fn backend_errors_carry_the_failed_tier() {
    let weak = Arc::new(Flaky {
        inner: SyntheticFm::new(ModelTier::Weak, profile(0.2, 0.4)),
        down: AtomicBool::new(false),
    });
    let strong = Arc::new(Flaky {
        inner: SyntheticFm::new(ModelTier::Strong, profile(0.2, 0.4)),
        down: AtomicBool::new(true),
    });
    let engine = Engine::builder(config(10), weak.clone(), strong.clone())
        .build()
        .unwrap();
    let err = engine.handle(request("x")).await.unwrap_err();
    assert!(matches!(
        err,
        EngineError::Backend {
            tier: ModelTier::Strong,
            ..
        }
    ));
    assert_eq!(err.failed_component(), Some("strong"));
    assert_eq!(engine.stats().failed_requests, 1);

    // A weak outage during shadow inference drops the task without writing.
    strong.down.store(false, Ordering::SeqCst);
    weak.down.store(true, Ordering::SeqCst);
    let resp = engine.handle(request("y")).await.unwrap();
    assert_eq!(resp.tier, ModelTier::Strong);
    engine.quiesce().await;
    let stats = engine.stats();
    assert_eq!(stats.shadow_failed, 1);
    assert_eq!(stats.shadow_completed, 0);
    assert_eq!(engine.memory_len(), 0);
    assert!(stats.is_consistent());
}

#[tokio::test]
async fn invalid_requests_are_rejected() {
    let rig = rig(profile(0.2, 0.4), config(10), StaticRouterSpec::always_strong());
    let err = rig.engine.handle(RequestRecord::new("x", "   ")).await.unwrap_err();
    assert!(matches!(err, EngineError::Request(_)));
    assert_eq!(rig.strong.calls(), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_keep_stats_consistent() {
    let rig = rig(profile(0.2, 0.4), config(50), StaticRouterSpec::always_strong());
    let mut tasks = Vec::new();
    for i in 0..64 {
        let engine = rig.engine.clone();
        tasks.push(tokio::spawn(async move {
            engine.handle(request(&format!("c{}", i % 16))).await
        }));
    }
    for t in tasks {
        t.await.unwrap().unwrap();
        assert!(rig.engine.stats().is_consistent());
    }
    rig.engine.quiesce().await;
    let stats = rig.engine.stats();
    assert!(stats.is_consistent());
    assert_eq!(stats.total_requests, 64);
    assert_eq!(stats.strong_calls_total, rig.strong.calls());
    assert_eq!(rig.engine.next_seq(), 64);
    let mem = rig.engine.memory_snapshot();
    assert!(mem.entries().windows(2).all(|w| w[0].created_seq < w[1].created_seq));
}

async fn trace(ids: &[String], p: SyntheticProfile, k: u32, r: u64) -> (Vec<(CaseKind, u32, u64)>, Vec<u8>, u64) {
    let cfg = RarConfig {
        max_fresh_guides: k,
        ..config(r)
    };
    let rig = rig(p, cfg, StaticRouterSpec::always_strong());
    let mut out = Vec::new();
    for id in ids {
        let before = rig.strong.calls();
        let (_, outcome) = rig.engine.handle_and_shadow(request(id)).await.unwrap();
        out.push((outcome.kind, outcome.strong_calls, rig.strong.calls() - before));
    }
    (out, rig.engine.export_memory(), rig.weak.calls())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn strong_call_accounting_matches_counter(
        picks in proptest::collection::vec(0usize..12, 1..40),
        p_alone in 0.0f64..0.5,
        p_guided in 0.0f64..0.5,
        k in 1u32..4,
        r in 1u64..8,
    ) {
        let ids: Vec<String> = picks.iter().map(|i| format!("p{i}")).collect();
        let p = profile(p_alone, p_guided);
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let (a, mem_a, weak_a) = rt.block_on(trace(&ids, p.clone(), k, r));
        for (kind, claimed, observed) in &a {
            prop_assert_eq!(u64::from(*claimed), *observed, "{:?}", kind);
            if kind.is_shadow() {
                prop_assert!(*claimed >= 1);
            }
        }
        // The whole trace is reproducible.
        let (b, mem_b, weak_b) = rt.block_on(trace(&ids, p, k, r));
        prop_assert_eq!(a, b);
        prop_assert_eq!(mem_a, mem_b);
        prop_assert_eq!(weak_a, weak_b);
    }
}
