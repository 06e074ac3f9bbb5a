//! Asynchronous state reconciliation over two inference resources.
//!
//! The foreground track appends state chunks and serves queries on the primary
//! resource. When the static state reaches `tau_mem`, a snapshot is evicted
//! and a [`ReconcileJob`] is handed out: it warms the secondary resource up on
//! the evicted state, folds in chunks buffered meanwhile until at most
//! `n_catchup` tokens remain, then swaps the two resources in one step.
//!
//! The job is a step machine so that the same code runs on a background thread
//! ([`ReconcileJob::run`]) or interleaved deterministically with foreground
//! work under virtual time ([`ReconcileJob::next_step`]).

use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, InferenceBackend, PrefillResult, ResourceId};
use crate::clock::Clock;
use crate::context::{ContextError, CsrContext, EvictionPolicy, StateChunk, TokenSeq};
use crate::events::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Static length (tokens) at which eviction is triggered.
    pub tau_mem: usize,
    /// Catch-up stops once at most this many buffered tokens remain.
    pub n_catchup: usize,
    /// Hard memory cap of a resource; reaching it before the swap raises an alarm.
    pub n_max: Option<usize>,
    pub policy: EvictionPolicy,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid scheduler configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerEventKind {
    Append,
    Evict,
    WarmupStart,
    Catchup,
    Swap,
    Query,
    OverflowAlarm,
    ReconcileFailed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSizes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evicted_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charged_units: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerEvent {
    pub time: f64,
    pub event: SchedulerEventKind,
    pub sizes: EventSizes,
    pub resource: Option<ResourceId>,
}

/// Point-in-time copy of the scheduler's state variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub x_static: TokenSeq,
    pub dx_buffer: Vec<StateChunk>,
    pub x_evicted: TokenSeq,
    pub r_primary: ResourceId,
    pub r_secondary: ResourceId,
    pub is_reconciling: bool,
    pub tau_mem: usize,
    pub n_catchup: usize,
}

/// Side effects requested by [`AsrScheduler::increment`].
#[derive(Debug)]
pub enum SchedulerAction {
    /// Run this job in parallel with foreground work.
    LaunchReconcile(ReconcileJob),
    /// The live state reached `n_max` while a reconciliation was still running.
    OverflowAlarm { static_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedQuery {
    pub resource: ResourceId,
    pub static_len: usize,
    pub seq_len: usize,
    pub result: PrefillResult,
}

struct Core {
    /// Static state served by the primary resource.
    live: CsrContext,
    /// Evicted snapshot extended by every chunk appended since the trigger;
    /// becomes `live` at the swap.
    next: Option<CsrContext>,
    /// Sequence prefilled (or being prefilled) on the secondary resource.
    x_evicted: TokenSeq,
    primary: ResourceId,
    secondary: ResourceId,
    is_reconciling: bool,
    overflow_raised: bool,
    evictions: u64,
    swaps: u64,
}

pub struct AsrScheduler {
    config: SchedulerConfig,
    core: Mutex<Core>,
    // Lock order: `core` before `buffer`.
    buffer: Mutex<Vec<StateChunk>>,
    clock: Arc<dyn Clock>,
    log: EventLog<SchedulerEvent>,
}

impl AsrScheduler {
    pub fn new(config: SchedulerConfig, initial: CsrContext, clock: Arc<dyn Clock>) -> Result<Self, SchedulerError> {
        config.policy.validate()?;
        if let Some(n_max) = config.n_max {
            if config.tau_mem >= n_max {
                return Err(SchedulerError::Config(format!(
                    "tau_mem ({}) must be below n_max ({n_max})",
                    config.tau_mem
                )));
            }
        }
        Ok(Self {
            config,
            core: Mutex::new(Core {
                live: initial,
                next: None,
                x_evicted: TokenSeq::empty(),
                primary: ResourceId::R1,
                secondary: ResourceId::R2,
                is_reconciling: false,
                overflow_raised: false,
                evictions: 0,
                swaps: 0,
            }),
            buffer: Mutex::new(Vec::new()),
            clock,
            log: EventLog::new(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn events(&self) -> &EventLog<SchedulerEvent> {
        &self.log
    }

    fn lock_core(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap()
    }

    fn record(&self, event: SchedulerEventKind, sizes: EventSizes, resource: Option<ResourceId>) {
        self.log.push(SchedulerEvent {
            time: self.clock.now(),
            event,
            sizes,
            resource,
        });
    }

    pub fn snapshot(&self) -> SchedulerState {
        let core = self.lock_core();
        let buffer = self.buffer.lock().unwrap();
        SchedulerState {
            x_static: core.live.static_tokens(),
            dx_buffer: buffer.clone(),
            x_evicted: core.x_evicted.clone(),
            r_primary: core.primary,
            r_secondary: core.secondary,
            is_reconciling: core.is_reconciling,
            tau_mem: self.config.tau_mem,
            n_catchup: self.config.n_catchup,
        }
    }

    pub fn is_reconciling(&self) -> bool {
        self.lock_core().is_reconciling
    }

    pub fn primary(&self) -> ResourceId {
        self.lock_core().primary
    }

    pub fn static_len(&self) -> usize {
        self.lock_core().live.static_cursor()
    }

    pub fn live_context(&self) -> CsrContext {
        self.lock_core().live.clone()
    }

    pub fn evictions(&self) -> u64 {
        self.lock_core().evictions
    }

    pub fn swaps(&self) -> u64 {
        self.lock_core().swaps
    }

    /// Appends a chunk to the live state, duplicating it into the catch-up
    /// buffer while a reconciliation is running, and triggers eviction when
    /// the static state reaches `tau_mem`.
    pub fn increment(&self, chunk: StateChunk) -> Result<Vec<SchedulerAction>, SchedulerError> {
        let mut actions = Vec::new();
        let mut core = self.lock_core();
        core.live.append_chunk(chunk.clone())?;
        if core.is_reconciling {
            if let Some(next) = core.next.as_mut() {
                next.append_chunk(chunk.clone())?;
            }
            self.buffer.lock().unwrap().push(chunk);
        }
        let static_len = core.live.static_cursor();
        self.record(
            SchedulerEventKind::Append,
            EventSizes {
                static_len: Some(static_len),
                ..Default::default()
            },
            Some(core.primary),
        );

        if static_len >= self.config.tau_mem && !core.is_reconciling {
            let mut snapshot = core.live.clone();
            snapshot.evict(&self.config.policy);
            core.x_evicted = snapshot.static_tokens();
            let evicted_len = core.x_evicted.len();
            core.next = Some(snapshot);
            core.is_reconciling = true;
            core.evictions += 1;
            let secondary = core.secondary;
            self.record(
                SchedulerEventKind::Evict,
                EventSizes {
                    static_len: Some(static_len),
                    evicted_len: Some(evicted_len),
                    ..Default::default()
                },
                Some(core.primary),
            );
            actions.push(SchedulerAction::LaunchReconcile(ReconcileJob {
                pending: Some(core.x_evicted.clone()),
                warmed_up: false,
                finished: false,
                prefills: 0,
                drained: Vec::new(),
            }));
            self.record(
                SchedulerEventKind::WarmupStart,
                EventSizes {
                    evicted_len: Some(evicted_len),
                    ..Default::default()
                },
                Some(secondary),
            );
        } else if core.is_reconciling
            && !core.overflow_raised
            && self.config.n_max.is_some_and(|cap| static_len >= cap)
        {
            core.overflow_raised = true;
            self.record(
                SchedulerEventKind::OverflowAlarm,
                EventSizes {
                    static_len: Some(static_len),
                    ..Default::default()
                },
                Some(core.primary),
            );
            actions.push(SchedulerAction::OverflowAlarm { static_len });
        }
        Ok(actions)
    }

    /// Prefills `static ⊕ suffix ⊕ task` on the primary resource.
    pub fn serve_query(
        &self,
        suffix: &TokenSeq,
        task: &TokenSeq,
        backend: &dyn InferenceBackend,
    ) -> Result<ServedQuery, SchedulerError> {
        let (resource, seq, static_len) = {
            let core = self.lock_core();
            (core.primary, core.live.assemble_with(suffix, task), core.live.static_cursor())
        };
        let result = backend.prefill(resource, &seq)?;
        self.record(
            SchedulerEventKind::Query,
            EventSizes {
                static_len: Some(static_len),
                seq_len: Some(seq.len()),
                charged_units: result.charged_units,
                ..Default::default()
            },
            Some(resource),
        );
        Ok(ServedQuery {
            resource,
            static_len,
            seq_len: seq.len(),
            result,
        })
    }
}

/// What a reconciliation wants to do next.
#[derive(Debug, Clone, PartialEq)]
pub enum ReconcileStep {
    /// Prefill `seq` on `resource`, then report back.
    Prefill { resource: ResourceId, seq: TokenSeq },
    /// The resources have been swapped; the job is finished.
    Swapped,
}

/// Background half of the reconciliation: warm-up, catch-up, swap.
#[derive(Debug)]
pub struct ReconcileJob {
    pending: Option<TokenSeq>,
    warmed_up: bool,
    finished: bool,
    prefills: usize,
    drained: Vec<u64>,
}

impl ReconcileJob {
    /// Successful prefills issued so far (warm-up plus catch-up rounds).
    pub fn prefills(&self) -> usize {
        self.prefills
    }

    /// Ids of the chunks folded into the secondary's state during catch-up.
    pub fn drained_chunk_ids(&self) -> &[u64] {
        &self.drained
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Decides the next step. A prefill that has not been acknowledged with
    /// [`prefill_succeeded`](Self::prefill_succeeded) is handed out again.
    pub fn next_step(&mut self, sched: &AsrScheduler) -> ReconcileStep {
        if self.finished {
            return ReconcileStep::Swapped;
        }
        let mut core = sched.lock_core();
        if let Some(seq) = &self.pending {
            return ReconcileStep::Prefill {
                resource: core.secondary,
                seq: seq.clone(),
            };
        }
        let mut buffer = sched.buffer.lock().unwrap();
        let buffered: usize = buffer.iter().map(|c| c.tokens.len()).sum();
        if buffered > sched.config.n_catchup {
            for chunk in buffer.drain(..) {
                core.x_evicted.extend_from(&chunk.tokens);
                self.drained.push(chunk.chunk_id);
            }
            let seq = core.x_evicted.clone();
            self.pending = Some(seq.clone());
            sched.record(
                SchedulerEventKind::Catchup,
                EventSizes {
                    buffer_tokens: Some(buffered),
                    evicted_len: Some(seq.len()),
                    ..Default::default()
                },
                Some(core.secondary),
            );
            return ReconcileStep::Prefill {
                resource: core.secondary,
                seq,
            };
        }

        // Swap: resource handles, live state and flag change under one lock.
        buffer.clear();
        let core = &mut *core;
        std::mem::swap(&mut core.primary, &mut core.secondary);
        if let Some(next) = core.next.take() {
            core.live = next;
        }
        core.is_reconciling = false;
        core.overflow_raised = false;
        core.swaps += 1;
        self.finished = true;
        sched.record(
            SchedulerEventKind::Swap,
            EventSizes {
                static_len: Some(core.live.static_cursor()),
                buffer_tokens: Some(buffered),
                evicted_len: Some(core.x_evicted.len()),
                ..Default::default()
            },
            Some(core.primary),
        );
        ReconcileStep::Swapped
    }

    pub fn prefill_succeeded(&mut self) {
        if self.pending.take().is_some() {
            self.prefills += 1;
            self.warmed_up = true;
        }
    }

    /// Records a failed prefill. The reconciliation stays active and the same
    /// prefill is retried by the next call to [`next_step`](Self::next_step).
    pub fn prefill_failed(&mut self, sched: &AsrScheduler, err: &BackendError) {
        let core = sched.lock_core();
        sched.record(
            SchedulerEventKind::ReconcileFailed,
            EventSizes {
                evicted_len: self.pending.as_ref().map(TokenSeq::len),
                ..Default::default()
            },
            Some(core.secondary),
        );
        let _ = err;
    }

    /// Whether the warm-up prefill has completed.
    pub fn warmed_up(&self) -> bool {
        self.warmed_up
    }

    /// Drives the job to completion, blocking on each prefill. On a backend
    /// error the job stops with the reconciliation still active and can be
    /// resumed by calling `run` again.
    pub fn run(&mut self, sched: &AsrScheduler, backend: &dyn InferenceBackend) -> Result<(), BackendError> {
        loop {
            match self.next_step(sched) {
                ReconcileStep::Prefill { resource, seq } => match backend.prefill(resource, &seq) {
                    Ok(_) => self.prefill_succeeded(),
                    Err(err) => {
                        self.prefill_failed(sched, &err);
                        return Err(err);
                    }
                },
                ReconcileStep::Swapped => return Ok(()),
            }
        }
    }
}
