use std::sync::Arc;

use csr_core::backend::{InferenceBackend, MockBackend, ResourceId};
use csr_core::context::{first_differing_index, CsrContext, EvictionPolicy, StateChunk, TokenSeq};
use csr_core::cost::{reconciliation_feasibility, ttft_units, HardwareProfile};
use csr_core::router::{EvictionNotice, Router, RouterConfig, RouterReconciler, RouterStep, RoutingCase, VersionedQuery};
use csr_core::scheduler::{AsrScheduler, ReconcileStep, SchedulerAction, SchedulerConfig};
use csr_core::sim::{run_scenario, Horizon, Policy, ScenarioConfig, TraceEventKind};
use csr_core::{Clock, VirtualClock};
use proptest::prelude::*;

fn seq(v: Vec<u32>) -> TokenSeq {
    TokenSeq::new(v)
}

fn context(prefix: Vec<u32>, chunks: Vec<Vec<u32>>) -> CsrContext {
    let mut ctx = CsrContext::new(seq(prefix));
    for (i, c) in chunks.into_iter().enumerate() {
        ctx.append_chunk(StateChunk::new(i as u64 + 1, seq(c), 0.0)).unwrap();
    }
    ctx
}

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..50, 1..max_len)
}

fn policy() -> impl Strategy<Value = EvictionPolicy> {
    prop_oneof![
        Just(EvictionPolicy::OldestHalf),
        (0.05f64..1.0).prop_map(|fraction| EvictionPolicy::KeepNewestFraction { fraction }),
    ]
}

fn brute_units(n: u64, i_star: u64) -> u64 {
    (i_star..=n).sum()
}

#[derive(Debug, Clone)]
enum CtxOp {
    Append(Vec<u32>),
    Dynamic(Vec<u32>, Vec<u32>),
    Evict(EvictionPolicy),
}

fn ctx_op() -> impl Strategy<Value = CtxOp> {
    prop_oneof![
        3 => tokens(8).prop_map(CtxOp::Append),
        1 => (tokens(4), tokens(4)).prop_map(|(s, t)| CtxOp::Dynamic(s, t)),
        1 => policy().prop_map(CtxOp::Evict),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn eviction_bumps_version_and_keeps_prefix(
        prefix in tokens(10),
        chunks in prop::collection::vec(tokens(6), 1..20),
        p in policy(),
    ) {
        let mut ctx = context(prefix.clone(), chunks);
        let before = ctx.clone();
        ctx.evict(&p);
        prop_assert_eq!(ctx.seq_version(), before.seq_version() + 1);
        prop_assert_eq!(ctx.prefix().as_slice(), prefix.as_slice());
        // Survivors are the newest chunks, unchanged and in order.
        let kept = ctx.chunks();
        prop_assert!(before.chunks().ends_with(kept));
    }

    #[test]
    fn assemble_depends_only_on_value(prefix in tokens(10), chunks in prop::collection::vec(tokens(6), 0..10)) {
        let a = context(prefix, chunks);
        let b = CsrContext::from_json(&a.to_json().unwrap()).unwrap();
        prop_assert_eq!(a.assemble(), b.assemble());
        prop_assert_eq!(a.clone().assemble(), a.assemble());
    }

    #[test]
    fn only_eviction_drops_chunks(prefix in tokens(6), ops in prop::collection::vec(ctx_op(), 1..40)) {
        let mut ctx = CsrContext::new(seq(prefix));
        let mut next_id = 1;
        for op in ops {
            let before: Vec<u64> = ctx.chunks().iter().map(|c| c.chunk_id).collect();
            let evicting = matches!(op, CtxOp::Evict(_));
            match op {
                CtxOp::Append(t) => {
                    ctx.append_chunk(StateChunk::new(next_id, seq(t), 0.0)).unwrap();
                    next_id += 1;
                }
                CtxOp::Dynamic(s, t) => ctx.set_dynamic(seq(s), seq(t)),
                CtxOp::Evict(p) => {
                    ctx.evict(&p);
                }
            }
            let after: Vec<u64> = ctx.chunks().iter().map(|c| c.chunk_id).collect();
            if evicting {
                prop_assert!(before.ends_with(&after));
            } else {
                prop_assert!(after.starts_with(&before));
            }
        }
    }

    #[test]
    fn units_match_brute_force(n in 0u64..3_000, frac in 0.0f64..=1.0) {
        let i_star = 1 + ((n as f64) * frac).round() as u64;
        prop_assert_eq!(ttft_units(n, i_star).unwrap(), brute_units(n, i_star));
    }

    #[test]
    fn units_monotone(n in 2u64..1_000_000, i in 1u64..1_000_000) {
        let i = i.min(n);
        prop_assert!(ttft_units(n, i).unwrap() > ttft_units(n, i + 1).unwrap());
        prop_assert!(ttft_units(n + 1, i).unwrap() > ttft_units(n, i).unwrap());
    }

    #[test]
    fn full_recompute_ratio_grows_with_length(delta in 1u64..1_000, factor in 2u64..1_000) {
        let ratio = |n: u64| ttft_units(n, 1).unwrap() as f64 / ttft_units(n, n - delta + 1).unwrap() as f64;
        let n = delta * factor;
        prop_assert!(ratio(2 * n) > ratio(n));
    }

    #[test]
    fn feasibility_monotone(
        total in 1_000u64..200_000,
        eps in 0.01f64..=1.0,
        extra in 0u64..100_000,
        more in 1u64..100_000,
        rate in 0.0f64..10_000.0,
        faster in 1.0f64..10.0,
    ) {
        let profile = HardwareProfile::default().with_token_rate(rate);
        let n_max = total + extra;
        let base = reconciliation_feasibility(total, eps, n_max, &profile).unwrap();
        let roomier = reconciliation_feasibility(total, eps, n_max + more, &profile).unwrap();
        prop_assert!(!base.feasible || roomier.feasible);
        let quicker = profile.with_token_rate(rate * faster + 1.0);
        let busier = reconciliation_feasibility(total, eps, n_max, &quicker).unwrap();
        prop_assert!(base.feasible || !busier.feasible);
    }

    #[test]
    fn mock_charges_and_isolation(
        requests in prop::collection::vec((any::<bool>(), tokens(40)), 1..30),
    ) {
        let profile = HardwareProfile::with_kappa(1, 1, 1e-3, 1.0, 0.0);
        let run = || {
            let clock = Arc::new(VirtualClock::new());
            let mock = MockBackend::new(&profile, clock);
            let mut out = Vec::new();
            for (first, t) in &requests {
                let r = if *first { ResourceId::R1 } else { ResourceId::R2 };
                let other = mock.cached_seq(r.other());
                let cached = mock.cached_seq(r);
                let s = seq(t.clone());
                let res = mock.prefill(r, &s).unwrap();
                assert_eq!(mock.cached_seq(r.other()), other);
                let i_star = first_differing_index(&cached, &s) as u64;
                assert_eq!(res.i_star, Some(i_star));
                assert_eq!(res.charged_units, Some(brute_units(s.len() as u64, i_star)));
                out.push(res);
            }
            out
        };
        let a = run();
        let b = run();
        prop_assert_eq!(a, b);
    }
}

// ---------------------------------------------------------------------------
// scheduler

#[derive(Debug, Clone)]
enum SchedOp {
    Chunk(u32),
    Query,
    Background,
}

fn sched_op() -> impl Strategy<Value = SchedOp> {
    prop_oneof![
        3 => (1u32..12).prop_map(SchedOp::Chunk),
        2 => Just(SchedOp::Query),
        3 => Just(SchedOp::Background),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scheduler_serves_incrementally_and_reconciles_once(
        tau in 20usize..120,
        n_catchup in 0usize..30,
        p in policy(),
        ops in prop::collection::vec(sched_op(), 1..150),
    ) {
        let clock = Arc::new(VirtualClock::new());
        let mock = MockBackend::new(&HardwareProfile::with_kappa(1, 1, 1e-6, 1.0, 0.0), clock.clone());
        let sched = AsrScheduler::new(
            SchedulerConfig { tau_mem: tau, n_catchup, n_max: None, policy: p },
            CsrContext::new(seq(vec![1, 2, 3])),
            clock.clone(),
        ).unwrap();
        let mut job = None;
        let mut next_id = 1;
        // Static tokens known to head each resource's cache.
        let mut warm = [0usize; 2];
        let mut swaps = 0;
        for op in ops {
            clock.advance_to(clock.now() + 0.01);
            match op {
                SchedOp::Chunk(len) => {
                    let was = sched.is_reconciling();
                    let chunk = StateChunk::new(next_id, (0..len).map(|i| 100 + next_id as u32 * 16 + i).collect(), 0.0);
                    next_id += 1;
                    for action in sched.increment(chunk).unwrap() {
                        if let SchedulerAction::LaunchReconcile(j) = action {
                            prop_assert!(!was && job.is_none(), "second reconciliation launched");
                            job = Some(j);
                        }
                    }
                }
                SchedOp::Query => {
                    let reconciling = sched.is_reconciling();
                    let secondary = sched.primary().other();
                    let q = sched.serve_query(&seq(vec![7]), &seq(vec![8, 9]), &mock).unwrap();
                    if reconciling {
                        prop_assert_ne!(q.resource, secondary);
                    }
                    let w = warm[q.resource.index()];
                    let bound = ttft_units(q.seq_len as u64, (w.min(q.static_len) + 1) as u64).unwrap();
                    prop_assert!(q.result.charged_units.unwrap() <= bound);
                    warm[q.resource.index()] = q.static_len;
                }
                SchedOp::Background => {
                    let Some(j) = job.as_mut() else { continue };
                    match j.next_step(&sched) {
                        ReconcileStep::Prefill { resource, seq } => {
                            mock.prefill(resource, &seq).unwrap();
                            j.prefill_succeeded();
                            warm[resource.index()] = seq.len();
                        }
                        ReconcileStep::Swapped => {
                            swaps += 1;
                            prop_assert_eq!(sched.swaps(), swaps);
                            job = None;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// router

#[derive(Debug, Clone)]
enum RouterOp {
    Chunk(u32),
    QueryNewest,
    Snapshot,
    DeliverOld(prop::sample::Index),
    Background,
    Evict,
}

fn router_op() -> impl Strategy<Value = RouterOp> {
    prop_oneof![
        3 => (1u32..6).prop_map(RouterOp::Chunk),
        3 => Just(RouterOp::QueryNewest),
        1 => Just(RouterOp::Snapshot),
        1 => any::<prop::sample::Index>().prop_map(RouterOp::DeliverOld),
        3 => Just(RouterOp::Background),
        1 => Just(RouterOp::Evict),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn router_versions_buffers_and_post_swap_hits(
        n_catchup in 0usize..10,
        ops in prop::collection::vec(router_op(), 1..200),
    ) {
        let clock = Arc::new(VirtualClock::new());
        let mock = MockBackend::new(&HardwareProfile::with_kappa(1, 1, 1e-6, 1.0, 0.0), clock.clone());
        let router = Router::new(RouterConfig::new(n_catchup), clock.clone());
        let mut ctx = CsrContext::new(seq(vec![1, 2, 3]));
        let mut j_eps = None;
        let mut next_id = 1u64;
        let mut next_dyn = 1u32 << 30;
        let mut held: Vec<VersionedQuery> = Vec::new();
        let mut job: Option<RouterReconciler> = None;
        let mut pre_eviction = TokenSeq::empty();
        // Static cursor of the swap query, until the next routed query.
        let mut swapped_at: Option<usize> = None;
        let mut k = router.state().k;

        for op in ops {
            clock.advance_to(clock.now() + 0.001);
            let mut query = |ctx: &CsrContext, j_eps| {
                next_dyn += 1;
                VersionedQuery::from_context(ctx, &seq(vec![next_dyn]), &seq(vec![5]), j_eps)
            };
            let to_route = match op {
                RouterOp::Chunk(len) => {
                    let tokens = (0..len).map(|i| 100 + next_id as u32 * 8 + i).collect();
                    ctx.append_chunk(StateChunk::new(next_id, tokens, 0.0)).unwrap();
                    next_id += 1;
                    None
                }
                RouterOp::QueryNewest => Some(query(&ctx, j_eps)),
                RouterOp::Snapshot => {
                    held.push(query(&ctx, j_eps));
                    None
                }
                RouterOp::DeliverOld(i) => {
                    if held.is_empty() {
                        None
                    } else {
                        let q = held.remove(i.index(held.len()));
                        // Held queries can skip a version; the router rejects those.
                        (q.k_t <= router.state().k + 1).then_some(q)
                    }
                }
                RouterOp::Background => {
                    if let Some(j) = job.as_mut() {
                        let secondary = router.state().r_secondary;
                        match j.next_step(&router) {
                            RouterStep::Prefill { resource, seq } => {
                                prop_assert_eq!(resource, secondary);
                                mock.prefill(resource, &seq).unwrap();
                                j.prefill_succeeded();
                            }
                            RouterStep::Ready => {
                                // Every bridged Δ lands exactly once in a catch-up round or the residual.
                                let mut replay = pre_eviction.clone();
                                for d in j.drained() {
                                    replay.extend_from(d);
                                }
                                replay.extend_from(j.residual());
                                prop_assert_eq!(&replay, &router.state().x_recon);
                                job = None;
                            }
                        }
                    }
                    None
                }
                RouterOp::Evict => {
                    let s = router.state();
                    if job.is_none() && !s.is_reconciling && s.k_ready <= s.k && s.k == ctx.seq_version() && ctx.chunks().len() >= 2 {
                        let before = ctx.clone();
                        ctx.evict(&EvictionPolicy::OldestHalf);
                        let notice = EvictionNotice::from_contexts(&before, &ctx);
                        j_eps = Some(notice.j_eps);
                        pre_eviction = before.static_tokens();
                        job = Some(router.start_reconcile(notice).unwrap());
                    }
                    None
                }
            };
            let Some(q) = to_route else { continue };
            let s = router.state();
            let calls = mock.call_count();
            let (d, result) = router.route(&q, &mock).unwrap();
            if s.is_reconciling && d.case != RoutingCase::Swap {
                prop_assert!(mock.calls()[calls..].iter().all(|c| c.resource != s.r_secondary));
            }
            let now_k = router.state().k;
            prop_assert!(now_k == k || (now_k == k + 1 && d.case == RoutingCase::Swap));
            k = now_k;
            if let Some(j) = swapped_at.filter(|&j| d.case == RoutingCase::Continuation && q.j_t >= j) {
                // The static state of the swap query is reused whole.
                prop_assert!(result.i_star.unwrap() as usize > j);
            }
            swapped_at = (d.case == RoutingCase::Swap).then_some(q.j_t);
        }
    }
}

// ---------------------------------------------------------------------------
// simulation

fn small_scenario() -> impl Strategy<Value = ScenarioConfig> {
    (
        (5usize..30, 30usize..60, 1usize..30),
        (0.3f64..1.5, 0.5f64..2.0, 0.02f64..1.0),
        (1usize..12, any::<u64>(), any::<bool>()),
    )
        .prop_map(|((chunk, tau_chunks, headroom), (arrival, query_ratio, catchup_ratio), (catchup_chunks, seed, scheduler))| {
            let tau_mem = chunk * tau_chunks;
            // κ from the catch-up ratio rate·κ·τ.
            let kappa = catchup_ratio * arrival / (chunk * tau_mem) as f64;
            ScenarioConfig {
                chunk_tokens: chunk,
                arrival_period: arrival,
                query_period: arrival * query_ratio,
                prefix_tokens: 16,
                suffix_tokens: 2,
                task_tokens: 2,
                tau_mem,
                n_max: tau_mem + headroom * chunk,
                n_catchup: chunk * catchup_chunks,
                profile: HardwareProfile::default().rescaled(kappa),
                horizon: Horizon::Cycles(3),
                policy: if scheduler { Policy::CsrAsrScheduler } else { Policy::CsrAsr },
                seed,
                ..Default::default()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn simulation_is_deterministic(cfg in small_scenario()) {
        prop_assert_eq!(run_scenario(&cfg).unwrap(), run_scenario(&cfg).unwrap());
    }

    #[test]
    fn single_round_feasible_cycles_never_overflow(cfg in small_scenario()) {
        let trace = run_scenario(&cfg).unwrap();
        let rate = cfg.chunk_tokens as f64 / cfg.arrival_period;
        let profile = cfg.profile.with_token_rate(rate);
        let evictions: Vec<_> = trace.events.iter().filter(|e| e.kind == TraceEventKind::Eviction).collect();
        let mut all_feasible = true;
        for e in &evictions {
            let total = e.static_len.unwrap() as u64;
            let eps = e.seq_len.unwrap() as f64 / total as f64;
            if total >= cfg.n_max as u64 {
                all_feasible = false;
                continue;
            }
            let report = reconciliation_feasibility(total, eps, cfg.n_max as u64, &profile).unwrap();
            // The inequality models one catch-up round; it applies when what
            // arrives during that round stays under the catch-up threshold.
            let single_round = rate * report.recon_time + cfg.chunk_tokens as f64 <= cfg.n_catchup as f64;
            // A chunk arrival of discretization, and the router swaps on the next query.
            all_feasible &= single_round && report.slack() > cfg.arrival_period + cfg.query_period;
        }
        // The inequality also assumes an idle secondary at eviction, which an
        // overloaded foreground queue does not leave.
        let keeps_up = trace.samples.iter().all(|s| s.ttft_seconds < cfg.query_period);
        if all_feasible && keeps_up {
            prop_assert!(trace.overflow.is_none(), "overflow {:?}", trace.overflow);
        }
    }
}
