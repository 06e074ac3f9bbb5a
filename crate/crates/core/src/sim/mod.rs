//! Discrete-event scenario runner and experiment drivers.
//!
//! Virtual time advances from event to event. Chunks arrive every
//! `arrival_period`, queries every `query_period`, and background
//! reconciliation steps fire when their previous prefill completes. At equal
//! times background work runs first, then the chunk, then the query. Each
//! resource is a serial server, so a query that arrives while its resource is
//! busy waits in FIFO order; its latency is measured from arrival.

mod config;
mod engine;
mod feasibility;
mod live;
mod stats;
mod sweep;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, InferenceBackend, MockBackend, ResourceId};
use crate::clock::{Clock, VirtualClock};
use crate::context::{ContextError, StateChunk, Token, TokenSeq};
use crate::router::RouterError;
use crate::scheduler::SchedulerError;

pub use config::{Horizon, Mode, Policy, ScenarioConfig};
pub use engine::{
    build_engine, BackgroundJob, BackgroundStep, ChunkOutcome, Engine, EvictionSizes, InlineEngine, QueryOutcome,
    RouterEngine, SampleCase, SchedulerEngine,
};
pub use feasibility::{feasibility_map, FeasibilityGrid, FeasibilityMap, FeasibilityPoint, FeasibilitySummary};
pub use live::run_live;
pub use stats::{trace_stats, CycleSummary, Spike, StatsOptions, TraceStats};
pub use sweep::{sweep_latency, SweepRow, SweepTable};

/// Tokens at or above this value are never produced by the vocabulary and
/// serve as cache-busting markers.
pub const FRESH_TOKEN_BASE: Token = 1 << 30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("trace is empty")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftSample {
    pub query_index: u64,
    /// Arrival time of the query.
    pub scenario_time: f64,
    /// Completion minus arrival, queueing included.
    pub ttft_seconds: f64,
    /// Prefill duration on the resource alone.
    pub service_seconds: f64,
    pub routing_case: SampleCase,
    pub eviction_cycle_index: u64,
    pub resource: ResourceId,
    pub seq_len: usize,
    pub static_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charged_units: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEventKind {
    Eviction,
    BackgroundPrefill,
    BackgroundFailed,
    /// Scheduler swapped, or router published the new version.
    BackgroundFinished,
    Swap,
    OverflowAlarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: TraceEventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
}

impl TraceEvent {
    /// Eviction record: `static_len` is the length that crossed the
    /// threshold, `seq_len` the length kept.
    pub fn eviction(time: f64, primary: ResourceId, sizes: EvictionSizes) -> Self {
        TraceEvent {
            time,
            kind: TraceEventKind::Eviction,
            resource: Some(primary),
            static_len: Some(sizes.trigger_len),
            seq_len: Some(sizes.evicted_len),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TtftTrace {
    pub samples: Vec<TtftSample>,
    pub events: Vec<TraceEvent>,
    /// Set when the run stopped because the memory cap was reached.
    pub overflow: Option<TraceEvent>,
}

impl TtftTrace {
    pub fn ttfts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.ttft_seconds).collect()
    }

    pub fn swap_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.kind == TraceEventKind::Swap)
            .map(|e| e.time)
            .collect()
    }
}

/// What one call to [`Simulation::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Background {
        time: f64,
        prefill: Option<(ResourceId, usize)>,
        finished: bool,
    },
    Chunk {
        time: f64,
        chunk: StateChunk,
        evicted: bool,
        overflow: Option<usize>,
    },
    Query {
        sample: TtftSample,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Background,
    Chunk,
    Query,
}

/// Single-threaded simulation over the mock backend.
pub struct Simulation {
    cfg: ScenarioConfig,
    clock: Arc<VirtualClock>,
    backend: MockBackend,
    engine: Box<dyn Engine>,
    rng: ChaCha8Rng,
    job: Option<BackgroundJob>,
    next_background: Option<f64>,
    chunks_sent: u64,
    queries_sent: u64,
    fresh: u32,
    finished: bool,
    trace: TtftTrace,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let clock = Arc::new(VirtualClock::new());
        let backend = MockBackend::new(&cfg.profile, clock.clone());
        let engine = build_engine(&cfg, clock.clone())?;
        Ok(Simulation {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            clock,
            backend,
            engine,
            job: None,
            next_background: None,
            chunks_sent: 0,
            queries_sent: 0,
            fresh: 0,
            finished: false,
            trace: TtftTrace::default(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &MockBackend {
        &self.backend
    }

    /// Static prefix every policy starts from.
    pub fn prefix(&self) -> TokenSeq {
        engine::prefix_tokens(&self.cfg)
    }

    pub fn engine(&self) -> &dyn Engine {
        self.engine.as_ref()
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn trace(&self) -> &TtftTrace {
        &self.trace
    }

    pub fn reconciling(&self) -> bool {
        self.job.is_some()
    }

    fn next_event(&self) -> Option<(f64, EventKind)> {
        let chunk_at = (self.chunks_sent + 1) as f64 * self.cfg.arrival_period;
        let query_at = (self.queries_sent + 1) as f64 * self.cfg.query_period;
        let mut best = (chunk_at, EventKind::Chunk);
        if let Some(t) = self.next_background {
            if t <= best.0 {
                best = (t, EventKind::Background);
            }
        }
        if query_at < best.0 {
            best = (query_at, EventKind::Query);
        }
        if let Horizon::Duration(d) = self.cfg.horizon {
            if best.0 > d {
                return None;
            }
        }
        Some(best)
    }

    fn random_tokens(&mut self, n: usize) -> TokenSeq {
        let vocab = self.cfg.vocab_size;
        (0..n).map(|_| self.rng.gen_range(0..vocab)).collect()
    }

    /// Processes the next event. Returns `None` once the horizon is reached or
    /// the memory cap stopped the run.
    pub fn step(&mut self) -> Result<Option<StepOutcome>, SimError> {
        if self.finished {
            return Ok(None);
        }
        let Some((time, kind)) = self.next_event() else {
            self.finished = true;
            return Ok(None);
        };
        self.clock.advance_to(time);
        let outcome = match kind {
            EventKind::Background => self.background(time),
            EventKind::Chunk => self.chunk(time)?,
            EventKind::Query => self.query(time)?,
        };
        Ok(Some(outcome))
    }

    fn background(&mut self, time: f64) -> StepOutcome {
        self.next_background = None;
        let Some(job) = self.job.as_mut() else {
            return StepOutcome::Background {
                time,
                prefill: None,
                finished: true,
            };
        };
        match job.next_step() {
            BackgroundStep::Prefill { resource, seq } => match self.backend.prefill(resource, &seq) {
                Ok(result) => {
                    job.succeeded();
                    self.next_background = Some(result.completed_at);
                    self.trace.events.push(TraceEvent {
                        time,
                        kind: TraceEventKind::BackgroundPrefill,
                        resource: Some(resource),
                        static_len: None,
                        seq_len: Some(seq.len()),
                    });
                    StepOutcome::Background {
                        time,
                        prefill: Some((resource, seq.len())),
                        finished: false,
                    }
                }
                Err(err) => {
                    job.failed(&err);
                    self.next_background = Some(time + self.cfg.arrival_period);
                    self.trace.events.push(TraceEvent {
                        time,
                        kind: TraceEventKind::BackgroundFailed,
                        resource: Some(resource),
                        static_len: None,
                        seq_len: Some(seq.len()),
                    });
                    StepOutcome::Background {
                        time,
                        prefill: None,
                        finished: false,
                    }
                }
            },
            BackgroundStep::Finished => {
                let scheduler_swap = matches!(job, BackgroundJob::Scheduler { .. });
                self.job = None;
                self.trace.events.push(TraceEvent {
                    time,
                    kind: TraceEventKind::BackgroundFinished,
                    resource: Some(self.engine.primary()),
                    static_len: None,
                    seq_len: None,
                });
                if scheduler_swap {
                    self.push_swap(time);
                }
                StepOutcome::Background {
                    time,
                    prefill: None,
                    finished: true,
                }
            }
        }
    }

    fn push_swap(&mut self, time: f64) {
        self.trace.events.push(TraceEvent {
            time,
            kind: TraceEventKind::Swap,
            resource: Some(self.engine.primary()),
            static_len: Some(self.engine.static_len()),
            seq_len: None,
        });
    }

    fn chunk(&mut self, time: f64) -> Result<StepOutcome, SimError> {
        self.chunks_sent += 1;
        let tokens = self.random_tokens(self.cfg.chunk_tokens);
        let chunk = StateChunk::new(self.chunks_sent, tokens, time);
        let out = self.engine.on_chunk(chunk.clone())?;
        if let Some(sizes) = out.eviction {
            self.trace.events.push(TraceEvent::eviction(time, self.engine.primary(), sizes));
            if let Horizon::Cycles(n) = self.cfg.horizon {
                if self.engine.evictions() > u64::from(n) {
                    self.finished = true;
                }
            }
        }
        if let Some(job) = out.job {
            self.job = Some(job);
            self.next_background = Some(time);
        }
        if let Some(held) = out.overflow {
            let event = TraceEvent {
                time,
                kind: TraceEventKind::OverflowAlarm,
                resource: Some(self.engine.primary()),
                static_len: Some(held),
                seq_len: None,
            };
            self.trace.events.push(event.clone());
            self.trace.overflow = Some(event);
            self.finished = true;
        }
        Ok(StepOutcome::Chunk {
            time,
            chunk,
            evicted: out.eviction.is_some(),
            overflow: out.overflow,
        })
    }

    fn query(&mut self, time: f64) -> Result<StepOutcome, SimError> {
        self.queries_sent += 1;
        let suffix = self.random_tokens(self.cfg.suffix_tokens);
        let task = self.random_tokens(self.cfg.task_tokens);
        let fresh = FRESH_TOKEN_BASE + self.fresh;
        self.fresh += 1;
        let out = self.engine.on_query(&suffix, &task, fresh, &self.backend)?;
        if out.case == SampleCase::Swap {
            self.push_swap(time);
        }
        let sample = TtftSample {
            query_index: self.queries_sent - 1,
            scenario_time: time,
            ttft_seconds: out.result.completed_at - time,
            service_seconds: out.result.ttft,
            routing_case: out.case,
            eviction_cycle_index: self.engine.evictions(),
            resource: out.resource,
            seq_len: out.seq_len,
            static_len: out.static_len,
            charged_units: out.result.charged_units,
        };
        self.trace.samples.push(sample.clone());
        Ok(StepOutcome::Query { sample })
    }

    /// Runs to the horizon and returns the trace.
    pub fn run(mut self) -> Result<TtftTrace, SimError> {
        while self.step()?.is_some() {}
        Ok(self.trace)
    }
}

/// Runs a scenario in simulated mode.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TtftTrace, SimError> {
    if cfg.mode == Mode::Live {
        return Err(SimError::Config(
            "live scenarios need upstream servers; use run_live".into(),
        ));
    }
    Simulation::new(cfg.clone())?.run()
}
