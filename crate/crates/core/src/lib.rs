//! Cached state representation (CSR) for long-running LLM agents and an
//! asynchronous state reconciliation (ASR) engine that keeps time-to-first-token
//! flat across context evictions by warming a second inference resource in the
//! background.
//!
//! * [`context`]: the partitioned task context and prefix matching.
//! * [`cost`]: analytic prefill cost, budgets and the reconciliation feasibility check.
//! * [`backend`]: the two-resource inference abstraction and its deterministic mock.
//! * [`scheduler`]: threshold-triggered eviction with background warm-up, catch-up and swap.
//! * [`router`]: per-query routing with sequence versions for concurrent requests.
//! * [`sim`]: discrete-event scenarios, latency sweeps, trace statistics and feasibility maps.

pub mod backend;
pub mod clock;
pub mod context;
pub mod cost;
pub mod events;
pub mod router;
pub mod scheduler;
pub mod sim;

pub use backend::{BackendError, InferenceBackend, MockBackend, PrefillResult, ResourceCacheState, ResourceId};
pub use clock::{Clock, VirtualClock, WallClock};
pub use context::{first_differing_index, ContextError, CsrContext, EvictionPolicy, StateChunk, Token, TokenSeq};
pub use cost::{FeasibilityReport, HardwareProfile, TimeBound};
