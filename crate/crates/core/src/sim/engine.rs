//! Policy engines: how a stream of chunks and queries reaches the backend.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, InferenceBackend, PrefillResult, ResourceId};
use crate::clock::Clock;
use crate::context::{CsrContext, EvictionPolicy, StateChunk, Token, TokenSeq};
use crate::router::{EvictionNotice, Router, RouterConfig, RouterReconciler, RouterStep, RoutingCase, VersionedQuery};
use crate::scheduler::{AsrScheduler, ReconcileJob, ReconcileStep, SchedulerAction, SchedulerConfig};

use super::config::{Policy, ScenarioConfig};
use super::SimError;

/// How a query was served, as recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCase {
    Continuation,
    Bridge,
    Swap,
    StragglerBridge,
    StragglerSecondary,
    /// Served verbatim on the primary by a policy without routing.
    Primary,
    /// Served with a fresh leading token.
    Unordered,
}

impl From<RoutingCase> for SampleCase {
    fn from(case: RoutingCase) -> Self {
        match case {
            RoutingCase::Continuation => SampleCase::Continuation,
            RoutingCase::Bridge => SampleCase::Bridge,
            RoutingCase::Swap => SampleCase::Swap,
            RoutingCase::StragglerBridge => SampleCase::StragglerBridge,
            RoutingCase::StragglerSecondary => SampleCase::StragglerSecondary,
        }
    }
}

/// Static lengths around an eviction trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionSizes {
    /// Static length that crossed the threshold.
    pub trigger_len: usize,
    /// Static length kept by the eviction.
    pub evicted_len: usize,
}

#[derive(Debug, Default)]
pub struct ChunkOutcome {
    pub eviction: Option<EvictionSizes>,
    pub job: Option<BackgroundJob>,
    /// Static length held on the primary when the memory cap was reached.
    pub overflow: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct QueryOutcome {
    pub case: SampleCase,
    pub resource: ResourceId,
    pub seq_len: usize,
    pub static_len: usize,
    pub result: PrefillResult,
}

/// Background reconciliation produced by an eviction.
pub enum BackgroundJob {
    Router { router: Arc<Router>, job: RouterReconciler },
    Scheduler { scheduler: Arc<AsrScheduler>, job: ReconcileJob },
}

impl std::fmt::Debug for BackgroundJob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackgroundJob::Router { job, .. } => f.debug_tuple("Router").field(job).finish(),
            BackgroundJob::Scheduler { job, .. } => f.debug_tuple("Scheduler").field(job).finish(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackgroundStep {
    Prefill { resource: ResourceId, seq: TokenSeq },
    Finished,
}

impl BackgroundJob {
    pub fn next_step(&mut self) -> BackgroundStep {
        match self {
            BackgroundJob::Router { router, job } => match job.next_step(router) {
                RouterStep::Prefill { resource, seq } => BackgroundStep::Prefill { resource, seq },
                RouterStep::Ready => BackgroundStep::Finished,
            },
            BackgroundJob::Scheduler { scheduler, job } => match job.next_step(scheduler) {
                ReconcileStep::Prefill { resource, seq } => BackgroundStep::Prefill { resource, seq },
                ReconcileStep::Swapped => BackgroundStep::Finished,
            },
        }
    }

    pub fn succeeded(&mut self) {
        match self {
            BackgroundJob::Router { job, .. } => job.prefill_succeeded(),
            BackgroundJob::Scheduler { job, .. } => job.prefill_succeeded(),
        }
    }

    pub fn failed(&mut self, err: &BackendError) {
        match self {
            BackgroundJob::Router { router, job } => job.prefill_failed(router),
            BackgroundJob::Scheduler { scheduler, job } => job.prefill_failed(scheduler, err),
        }
    }

    /// Blocking driver. Stops at the first backend error; calling again
    /// retries the failed prefill.
    pub fn run(&mut self, backend: &dyn InferenceBackend) -> Result<(), BackendError> {
        loop {
            match self.next_step() {
                BackgroundStep::Prefill { resource, seq } => match backend.prefill(resource, &seq) {
                    Ok(_) => self.succeeded(),
                    Err(err) => {
                        self.failed(&err);
                        return Err(err);
                    }
                },
                BackgroundStep::Finished => return Ok(()),
            }
        }
    }
}

pub trait Engine: Send {
    fn on_chunk(&mut self, chunk: StateChunk) -> Result<ChunkOutcome, SimError>;

    /// Serves one query. `fresh` is a token guaranteed never to have been
    /// used before, for policies that defeat the prefix cache.
    fn on_query(
        &mut self,
        suffix: &TokenSeq,
        task: &TokenSeq,
        fresh: Token,
        backend: &dyn InferenceBackend,
    ) -> Result<QueryOutcome, SimError>;

    fn evictions(&self) -> u64;

    fn primary(&self) -> ResourceId;

    /// Static length of the state the client currently sees.
    fn static_len(&self) -> usize;
}

pub fn build_engine(cfg: &ScenarioConfig, clock: Arc<dyn Clock>) -> Result<Box<dyn Engine>, SimError> {
    let initial = CsrContext::new(prefix_tokens(cfg));
    Ok(match cfg.policy {
        Policy::CsrAsr => Box::new(RouterEngine::new(cfg, initial, clock)),
        Policy::CsrAsrScheduler => Box::new(SchedulerEngine::new(cfg, initial, clock)?),
        Policy::CsrSyncEvict => Box::new(InlineEngine::new(cfg, initial, false)),
        Policy::UnorderedBaseline => Box::new(InlineEngine::new(cfg, initial, true)),
    })
}

/// Deterministic prefix so every policy starts from the same state.
pub(crate) fn prefix_tokens(cfg: &ScenarioConfig) -> TokenSeq {
    (0..cfg.prefix_tokens as u32).map(|i| i % cfg.vocab_size).collect()
}

/// Client-side context plus the versioned router.
pub struct RouterEngine {
    ctx: CsrContext,
    router: Arc<Router>,
    policy: EvictionPolicy,
    tau_mem: usize,
    n_max: usize,
    j_eps: Option<usize>,
    /// Static length before the eviction now being reconciled.
    pre_eviction_len: usize,
    in_flight: bool,
    evictions: u64,
}

impl RouterEngine {
    pub fn new(cfg: &ScenarioConfig, initial: CsrContext, clock: Arc<dyn Clock>) -> Self {
        let router = Router::new(
            RouterConfig {
                n_catchup: cfg.n_catchup,
                max_straggler_age: cfg.max_straggler_age,
            },
            clock,
        );
        RouterEngine {
            ctx: initial,
            router: Arc::new(router),
            policy: cfg.eviction_policy,
            tau_mem: cfg.tau_mem,
            n_max: cfg.n_max,
            j_eps: None,
            pre_eviction_len: 0,
            in_flight: false,
            evictions: 0,
        }
    }

    pub fn router(&self) -> &Arc<Router> {
        &self.router
    }

    pub fn context(&self) -> &CsrContext {
        &self.ctx
    }
}

impl Engine for RouterEngine {
    fn on_chunk(&mut self, chunk: StateChunk) -> Result<ChunkOutcome, SimError> {
        self.ctx.append_chunk(chunk)?;
        let static_len = self.ctx.static_cursor();
        let mut out = ChunkOutcome::default();
        if self.in_flight {
            // Until the swap the primary holds the pre-eviction state plus
            // everything appended since.
            let held = self.pre_eviction_len + static_len - self.j_eps.unwrap_or(0);
            if held >= self.n_max {
                out.overflow = Some(held);
            }
        } else if static_len >= self.tau_mem {
            let before = self.ctx.clone();
            self.ctx.evict(&self.policy);
            let notice = EvictionNotice::from_contexts(&before, &self.ctx);
            self.j_eps = Some(notice.j_eps);
            self.pre_eviction_len = before.static_cursor();
            let job = self.router.start_reconcile(notice)?;
            self.in_flight = true;
            self.evictions += 1;
            out.eviction = Some(EvictionSizes {
                trigger_len: before.static_cursor(),
                evicted_len: self.ctx.static_cursor(),
            });
            out.job = Some(BackgroundJob::Router {
                router: self.router.clone(),
                job,
            });
        }
        Ok(out)
    }

    fn on_query(
        &mut self,
        suffix: &TokenSeq,
        task: &TokenSeq,
        _fresh: Token,
        backend: &dyn InferenceBackend,
    ) -> Result<QueryOutcome, SimError> {
        let q = VersionedQuery::from_context(&self.ctx, suffix, task, self.j_eps);
        let (decision, result) = self.router.route(&q, backend)?;
        if decision.case == RoutingCase::Swap {
            self.in_flight = false;
        }
        Ok(QueryOutcome {
            case: decision.case.into(),
            resource: decision.resource,
            seq_len: q.tokens.len(),
            static_len: q.j_t,
            result,
        })
    }

    fn evictions(&self) -> u64 {
        self.evictions
    }

    fn primary(&self) -> ResourceId {
        self.router.primary()
    }

    fn static_len(&self) -> usize {
        self.ctx.static_cursor()
    }
}

/// Server-side snapshot scheduler; the client only sends dynamic parts.
pub struct SchedulerEngine {
    scheduler: Arc<AsrScheduler>,
}

impl SchedulerEngine {
    pub fn new(cfg: &ScenarioConfig, initial: CsrContext, clock: Arc<dyn Clock>) -> Result<Self, SimError> {
        let scheduler = AsrScheduler::new(
            SchedulerConfig {
                tau_mem: cfg.tau_mem,
                n_catchup: cfg.n_catchup,
                n_max: Some(cfg.n_max),
                policy: cfg.eviction_policy,
            },
            initial,
            clock,
        )?;
        Ok(SchedulerEngine {
            scheduler: Arc::new(scheduler),
        })
    }

    pub fn scheduler(&self) -> &Arc<AsrScheduler> {
        &self.scheduler
    }
}

impl Engine for SchedulerEngine {
    fn on_chunk(&mut self, chunk: StateChunk) -> Result<ChunkOutcome, SimError> {
        let mut out = ChunkOutcome::default();
        for action in self.scheduler.increment(chunk)? {
            match action {
                SchedulerAction::LaunchReconcile(job) => {
                    out.eviction = Some(EvictionSizes {
                        trigger_len: self.scheduler.static_len(),
                        evicted_len: self.scheduler.snapshot().x_evicted.len(),
                    });
                    out.job = Some(BackgroundJob::Scheduler {
                        scheduler: self.scheduler.clone(),
                        job,
                    });
                }
                SchedulerAction::OverflowAlarm { static_len } => out.overflow = Some(static_len),
            }
        }
        Ok(out)
    }

    fn on_query(
        &mut self,
        suffix: &TokenSeq,
        task: &TokenSeq,
        _fresh: Token,
        backend: &dyn InferenceBackend,
    ) -> Result<QueryOutcome, SimError> {
        let served = self.scheduler.serve_query(suffix, task, backend)?;
        Ok(QueryOutcome {
            case: SampleCase::Primary,
            resource: served.resource,
            seq_len: served.seq_len,
            static_len: served.static_len,
            result: served.result,
        })
    }

    fn evictions(&self) -> u64 {
        self.scheduler.evictions()
    }

    fn primary(&self) -> ResourceId {
        self.scheduler.primary()
    }

    fn static_len(&self) -> usize {
        self.scheduler.static_len()
    }
}

/// Single-resource policies: eviction applied in place, or no reuse at all.
pub struct InlineEngine {
    ctx: CsrContext,
    policy: EvictionPolicy,
    tau_mem: usize,
    unordered: bool,
    evictions: u64,
}

impl InlineEngine {
    pub fn new(cfg: &ScenarioConfig, initial: CsrContext, unordered: bool) -> Self {
        InlineEngine {
            ctx: initial,
            policy: cfg.eviction_policy,
            tau_mem: cfg.tau_mem,
            unordered,
            evictions: 0,
        }
    }
}

impl Engine for InlineEngine {
    fn on_chunk(&mut self, chunk: StateChunk) -> Result<ChunkOutcome, SimError> {
        self.ctx.append_chunk(chunk)?;
        let mut out = ChunkOutcome::default();
        let trigger_len = self.ctx.static_cursor();
        if trigger_len >= self.tau_mem {
            self.ctx.evict(&self.policy);
            self.evictions += 1;
            out.eviction = Some(EvictionSizes {
                trigger_len,
                evicted_len: self.ctx.static_cursor(),
            });
        }
        Ok(out)
    }

    fn on_query(
        &mut self,
        suffix: &TokenSeq,
        task: &TokenSeq,
        fresh: Token,
        backend: &dyn InferenceBackend,
    ) -> Result<QueryOutcome, SimError> {
        let body = self.ctx.assemble_with(suffix, task);
        let (seq, case) = if self.unordered {
            let mut seq = TokenSeq::new(vec![fresh]);
            seq.extend_from(&body);
            (seq, SampleCase::Unordered)
        } else {
            (body, SampleCase::Primary)
        };
        let result = backend.prefill(ResourceId::R1, &seq)?;
        Ok(QueryOutcome {
            case,
            resource: ResourceId::R1,
            seq_len: seq.len(),
            static_len: self.ctx.static_cursor(),
            result,
        })
    }

    fn evictions(&self) -> u64 {
        self.evictions
    }

    fn primary(&self) -> ResourceId {
        ResourceId::R1
    }

    fn static_len(&self) -> usize {
        self.ctx.static_cursor()
    }
}
