//! Per-query routing with sequence versions.
//!
//! Every query carries the full assembled sequence plus metadata: the static
//! cursor `j_t`, the sequence version `k_t` (bumped by each eviction on the
//! client side) and the evicted-static cursor `j_eps_t`. The router keeps the
//! primary resource serving the active version and decides per query:
//!
//! * `k_t == k`: continuation on the primary.
//! * `k_t == k + 1`, secondary not ready: bridge. The chunks appended since the
//!   eviction are stitched onto the primary's current static state and also
//!   handed to the background catch-up buffer.
//! * `k_t == k + 1`, secondary ready: swap the resources and serve verbatim.
//! * `k_t < k`: straggler. Bridged on the primary while a reconciliation is
//!   running, otherwise served on the secondary, which still holds the old
//!   version.
//!
//! Cursors count tokens.

use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, InferenceBackend, PrefillResult, ResourceId};
use crate::clock::Clock;
use crate::context::{CsrContext, TokenSeq};
use crate::events::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub n_catchup: usize,
    /// Reject stragglers older than this many seconds after the swap that
    /// superseded their version. Off by default.
    #[serde(default)]
    pub max_straggler_age: Option<f64>,
}

impl RouterConfig {
    pub fn new(n_catchup: usize) -> Self {
        Self {
            n_catchup,
            max_straggler_age: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedQuery {
    pub tokens: TokenSeq,
    /// Static length of `tokens`.
    pub j_t: usize,
    /// Sequence version the query was assembled from.
    pub k_t: u64,
    /// Static length right after the eviction that produced version `k_t`.
    pub j_eps_t: Option<usize>,
}

impl VersionedQuery {
    /// Assembles a query from a client context and an ad-hoc dynamic part.
    pub fn from_context(ctx: &CsrContext, suffix: &TokenSeq, task: &TokenSeq, j_eps: Option<usize>) -> Self {
        VersionedQuery {
            tokens: ctx.assemble_with(suffix, task),
            j_t: ctx.static_cursor(),
            k_t: ctx.seq_version(),
            j_eps_t: j_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingCase {
    /// Case 1: continuation of the active version.
    Continuation,
    /// Case 2: newer version, secondary still reconciling.
    Bridge,
    /// Case 2: newer version, secondary ready; resources swapped.
    Swap,
    /// Case 3: older version while reconciling.
    StragglerBridge,
    /// Case 3: older version, served by the secondary's intact cache.
    StragglerSecondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub case: RoutingCase,
    pub resource: ResourceId,
    /// Whether the served sequence was rebuilt from the router's
    /// reconciliation state rather than sent verbatim.
    pub stitched: bool,
}

/// Announcement that the client evicted its context.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionNotice {
    /// Evicted static state to warm up on the secondary.
    pub x_eps: TokenSeq,
    /// Version the evicted state belongs to; must be the active version + 1.
    pub k_target: u64,
    /// Static length of the evicted state.
    pub j_eps: usize,
    /// Full static state of the active version at the moment of eviction.
    pub pre_eviction_static: Option<TokenSeq>,
}

impl EvictionNotice {
    /// Builds the notice from the client context before and after eviction.
    pub fn from_contexts(before: &CsrContext, after: &CsrContext) -> Self {
        let x_eps = after.static_tokens();
        EvictionNotice {
            j_eps: x_eps.len(),
            x_eps,
            k_target: after.seq_version(),
            pre_eviction_static: Some(before.static_tokens()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouterError {
    #[error("query version {k_t} skips ahead of active version {k}")]
    VersionSkip { k_t: u64, k: u64 },
    #[error("static cursor {j_t} exceeds query length {len}")]
    CursorOutOfRange { j_t: usize, len: usize },
    #[error("query for version {k_t} arrived before any eviction was announced")]
    NoEvictionAnnounced { k_t: u64 },
    #[error("query carries evicted cursor {got}, announcement said {expected}")]
    InconsistentEvictionCursor { expected: usize, got: usize },
    #[error("a reconciliation is already in flight")]
    AlreadyReconciling,
    #[error("reconciliation target {k_target} must be active version {k} + 1")]
    BadTarget { k_target: u64, k: u64 },
    #[error("pre-eviction state does not extend the router's reconciliation state")]
    DivergentState,
    #[error("straggler is {age:.3}s old, limit {max:.3}s")]
    StaleStraggler { age: f64, max: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterLogCase {
    Case1Continuation,
    Case2Bridge,
    Case2Swap,
    Case3Bridge,
    Case3Secondary,
    ReconcileStart,
    Catchup,
    Ready,
    ReconcileFailed,
}

impl From<RoutingCase> for RouterLogCase {
    fn from(case: RoutingCase) -> Self {
        match case {
            RoutingCase::Continuation => RouterLogCase::Case1Continuation,
            RoutingCase::Bridge => RouterLogCase::Case2Bridge,
            RoutingCase::Swap => RouterLogCase::Case2Swap,
            RoutingCase::StragglerBridge => RouterLogCase::Case3Bridge,
            RoutingCase::StragglerSecondary => RouterLogCase::Case3Secondary,
        }
    }
}

/// One line of the router decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterRecord {
    pub time: f64,
    pub case: RouterLogCase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_t: Option<u64>,
    pub k: u64,
    pub k_ready: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stitched: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttft: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub straggler_age: Option<f64>,
}

/// Point-in-time copy of the router's state variables.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    pub j: usize,
    pub k: u64,
    pub k_ready: u64,
    pub j_eps: Option<usize>,
    pub x_recon: TokenSeq,
    pub dx_eps: TokenSeq,
    pub r_primary: ResourceId,
    pub r_secondary: ResourceId,
    pub is_reconciling: bool,
}

struct Core {
    j: usize,
    k: u64,
    k_ready: u64,
    j_eps: Option<usize>,
    announced_j_eps: Option<usize>,
    x_recon: TokenSeq,
    primary: ResourceId,
    secondary: ResourceId,
    is_reconciling: bool,
    last_swap_at: Option<f64>,
}

pub struct Router {
    config: RouterConfig,
    core: Mutex<Core>,
    // Lock order: `core` before `dx_eps`.
    dx_eps: Mutex<TokenSeq>,
    clock: Arc<dyn Clock>,
    log: EventLog<RouterRecord>,
}

impl Router {
    pub fn new(config: RouterConfig, clock: Arc<dyn Clock>) -> Self {
        Router {
            config,
            core: Mutex::new(Core {
                j: 0,
                k: 0,
                k_ready: 0,
                j_eps: None,
                announced_j_eps: None,
                x_recon: TokenSeq::empty(),
                primary: ResourceId::R1,
                secondary: ResourceId::R2,
                is_reconciling: false,
                last_swap_at: None,
            }),
            dx_eps: Mutex::new(TokenSeq::empty()),
            clock,
            log: EventLog::new(),
        }
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog<RouterRecord> {
        &self.log
    }

    fn lock_core(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap()
    }

    pub fn state(&self) -> RouterState {
        let core = self.lock_core();
        let dx = self.dx_eps.lock().unwrap();
        RouterState {
            j: core.j,
            k: core.k,
            k_ready: core.k_ready,
            j_eps: core.j_eps,
            x_recon: core.x_recon.clone(),
            dx_eps: dx.clone(),
            r_primary: core.primary,
            r_secondary: core.secondary,
            is_reconciling: core.is_reconciling,
        }
    }

    pub fn k(&self) -> u64 {
        self.lock_core().k
    }

    pub fn k_ready(&self) -> u64 {
        self.lock_core().k_ready
    }

    pub fn is_reconciling(&self) -> bool {
        self.lock_core().is_reconciling
    }

    pub fn primary(&self) -> ResourceId {
        self.lock_core().primary
    }

    pub fn x_recon_len(&self) -> usize {
        self.lock_core().x_recon.len()
    }

    fn record(&self, core: &Core, case: RouterLogCase) -> RouterRecord {
        RouterRecord {
            time: self.clock.now(),
            case,
            k_t: None,
            k: core.k,
            k_ready: core.k_ready,
            resource: None,
            stitched: None,
            ttft: None,
            straggler_age: None,
        }
    }

    /// Classifies the query, updates cursors and buffers, and serves it.
    pub fn route(
        &self,
        q: &VersionedQuery,
        backend: &dyn InferenceBackend,
    ) -> Result<(RoutingDecision, PrefillResult), RouterError> {
        let (decision, seq, mut record) = self.plan(q)?;
        let result = backend.prefill(decision.resource, &seq)?;
        record.ttft = Some(result.ttft);
        self.log.push(record);
        Ok((decision, result))
    }

    /// State transition half of [`route`](Self::route): returns where and what
    /// to prefill. Backend calls happen outside every lock.
    fn plan(&self, q: &VersionedQuery) -> Result<(RoutingDecision, TokenSeq, RouterRecord), RouterError> {
        if q.j_t > q.tokens.len() {
            return Err(RouterError::CursorOutOfRange {
                j_t: q.j_t,
                len: q.tokens.len(),
            });
        }
        let now = self.clock.now();
        let mut core = self.lock_core();
        if q.k_t > core.k + 1 {
            return Err(RouterError::VersionSkip { k_t: q.k_t, k: core.k });
        }
        let dynamic = &q.tokens.as_slice()[q.j_t..];
        let mut straggler_age = None;

        let (decision, seq) = if q.k_t == core.k {
            // Mid-reconciliation the bridge owns x_recon; a late query of the
            // current version only repeats a prefix of it.
            if q.j_t > core.j && !core.is_reconciling {
                core.x_recon = q.tokens.slice(0..q.j_t);
                core.j = q.j_t;
            }
            (
                RoutingDecision {
                    case: RoutingCase::Continuation,
                    resource: core.primary,
                    stitched: false,
                },
                q.tokens.clone(),
            )
        } else if q.k_t > core.k {
            if q.k_t > core.k_ready {
                let Some(j_eps) = core.j_eps else {
                    return Err(RouterError::NoEvictionAnnounced { k_t: q.k_t });
                };
                if let (Some(expected), Some(got)) = (core.announced_j_eps, q.j_eps_t) {
                    if expected != got {
                        return Err(RouterError::InconsistentEvictionCursor { expected, got });
                    }
                }
                if q.j_t > j_eps {
                    let delta = &q.tokens.as_slice()[j_eps..q.j_t];
                    core.x_recon.extend_from_slice(delta);
                    self.dx_eps.lock().unwrap().extend_from_slice(delta);
                    core.j_eps = Some(q.j_t);
                }
                let mut stitched = core.x_recon.clone();
                stitched.extend_from_slice(dynamic);
                (
                    RoutingDecision {
                        case: RoutingCase::Bridge,
                        resource: core.primary,
                        stitched: true,
                    },
                    stitched,
                )
            } else {
                let core = &mut *core;
                std::mem::swap(&mut core.primary, &mut core.secondary);
                core.is_reconciling = false;
                core.x_recon = q.tokens.slice(0..q.j_t);
                core.j = q.j_t;
                core.k = q.k_t;
                core.j_eps = None;
                core.announced_j_eps = None;
                core.last_swap_at = Some(now);
                (
                    RoutingDecision {
                        case: RoutingCase::Swap,
                        resource: core.primary,
                        stitched: false,
                    },
                    q.tokens.clone(),
                )
            }
        } else {
            let age = core.last_swap_at.map(|t| now - t).unwrap_or(0.0);
            straggler_age = Some(age);
            if let Some(max) = self.config.max_straggler_age {
                if age > max {
                    return Err(RouterError::StaleStraggler { age, max });
                }
            }
            if core.is_reconciling {
                let mut stitched = core.x_recon.clone();
                stitched.extend_from_slice(dynamic);
                (
                    RoutingDecision {
                        case: RoutingCase::StragglerBridge,
                        resource: core.primary,
                        stitched: true,
                    },
                    stitched,
                )
            } else {
                (
                    RoutingDecision {
                        case: RoutingCase::StragglerSecondary,
                        resource: core.secondary,
                        stitched: false,
                    },
                    q.tokens.clone(),
                )
            }
        };

        let mut record = self.record(&core, decision.case.into());
        record.k_t = Some(q.k_t);
        record.resource = Some(decision.resource);
        record.stitched = Some(decision.stitched);
        record.straggler_age = straggler_age;
        record.time = now;
        Ok((decision, seq, record))
    }

    /// Starts reconciling toward version `notice.k_target`.
    ///
    /// Marks the secondary as locked against stragglers, empties the catch-up
    /// buffer and returns the background job.
    pub fn start_reconcile(&self, notice: EvictionNotice) -> Result<RouterReconciler, RouterError> {
        let mut core = self.lock_core();
        if core.is_reconciling || core.k_ready > core.k {
            return Err(RouterError::AlreadyReconciling);
        }
        if notice.k_target != core.k + 1 {
            return Err(RouterError::BadTarget {
                k_target: notice.k_target,
                k: core.k,
            });
        }
        if let Some(pre) = notice.pre_eviction_static {
            if !pre.starts_with(&core.x_recon) {
                return Err(RouterError::DivergentState);
            }
            core.x_recon = pre;
        }
        core.is_reconciling = true;
        core.j_eps = Some(notice.j_eps);
        core.announced_j_eps = Some(notice.j_eps);
        self.dx_eps.lock().unwrap().clear();
        let record = self.record(&core, RouterLogCase::ReconcileStart);
        self.log.push(record);
        Ok(RouterReconciler {
            pending: Some(notice.x_eps.clone()),
            x_eps: notice.x_eps,
            k_target: notice.k_target,
            finished: false,
            prefills: 0,
            drained: Vec::new(),
            residual: TokenSeq::empty(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouterStep {
    Prefill { resource: ResourceId, seq: TokenSeq },
    /// `k_ready` has been published; the next newer-version query swaps.
    Ready,
}

/// Background reconciliation toward one version.
#[derive(Debug)]
pub struct RouterReconciler {
    x_eps: TokenSeq,
    k_target: u64,
    pending: Option<TokenSeq>,
    finished: bool,
    prefills: usize,
    drained: Vec<TokenSeq>,
    residual: TokenSeq,
}

impl RouterReconciler {
    pub fn k_target(&self) -> u64 {
        self.k_target
    }

    pub fn prefills(&self) -> usize {
        self.prefills
    }

    /// Buffer contents folded into the secondary, one entry per catch-up round.
    pub fn drained(&self) -> &[TokenSeq] {
        &self.drained
    }

    /// Buffer contents discarded at the end; recomputed by the first query
    /// after the swap.
    pub fn residual(&self) -> &TokenSeq {
        &self.residual
    }

    pub fn x_eps(&self) -> &TokenSeq {
        &self.x_eps
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn next_step(&mut self, router: &Router) -> RouterStep {
        if self.finished {
            return RouterStep::Ready;
        }
        let mut core = router.lock_core();
        if let Some(seq) = &self.pending {
            return RouterStep::Prefill {
                resource: core.secondary,
                seq: seq.clone(),
            };
        }
        let mut dx = router.dx_eps.lock().unwrap();
        if dx.len() > router.config.n_catchup {
            let taken = std::mem::take(&mut *dx);
            drop(dx);
            self.x_eps.extend_from(&taken);
            self.drained.push(taken);
            self.pending = Some(self.x_eps.clone());
            router.log.push(router.record(&core, RouterLogCase::Catchup));
            return RouterStep::Prefill {
                resource: core.secondary,
                seq: self.x_eps.clone(),
            };
        }
        self.residual = std::mem::take(&mut *dx);
        drop(dx);
        core.k_ready = self.k_target;
        self.finished = true;
        router.log.push(router.record(&core, RouterLogCase::Ready));
        RouterStep::Ready
    }

    pub fn prefill_succeeded(&mut self) {
        if self.pending.take().is_some() {
            self.prefills += 1;
        }
    }

    /// Logs an alarm; the reconciliation stays active and the prefill is
    /// handed out again by the next [`next_step`](Self::next_step).
    pub fn prefill_failed(&mut self, router: &Router) {
        let core = router.lock_core();
        router.log.push(router.record(&core, RouterLogCase::ReconcileFailed));
    }

    /// Blocking driver for a background thread.
    pub fn run(&mut self, router: &Router, backend: &dyn InferenceBackend) -> Result<(), BackendError> {
        loop {
            match self.next_step(router) {
                RouterStep::Prefill { resource, seq } => match backend.prefill(resource, &seq) {
                    Ok(_) => self.prefill_succeeded(),
                    Err(err) => {
                        self.prefill_failed(router);
                        return Err(err);
                    }
                },
                RouterStep::Ready => return Ok(()),
            }
        }
    }
}
