//! Inference resources.
//!
//! An engine drives exactly two resources, `R1` and `R2`. Each one keeps the
//! KV state of the last sequence it prefilled; a prefill only pays for the
//! positions after the first token that differs from that cached sequence.

mod mock;

pub use mock::{MockBackend, PrefillCall};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResourceId {
    R1,
    R2,
}

impl ResourceId {
    pub const ALL: [ResourceId; 2] = [ResourceId::R1, ResourceId::R2];

    pub fn other(self) -> ResourceId {
        match self {
            ResourceId::R1 => ResourceId::R2,
            ResourceId::R2 => ResourceId::R1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            ResourceId::R1 => 0,
            ResourceId::R2 => 1,
        }
    }
}

impl std::fmt::Display for ResourceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResourceId::R1 => f.write_str("R1"),
            ResourceId::R2 => f.write_str("R2"),
        }
    }
}

/// What a resource currently holds in its prefix cache.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceCacheState {
    pub cached_seq: TokenSeq,
    pub last_prefill_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillResult {
    /// Seconds from the start of the prefill to the first output token.
    pub ttft: f64,
    /// 1-based first differing index against the resource cache; unknown for
    /// remote servers.
    pub i_star: Option<u64>,
    /// Summation units charged; unknown for remote servers.
    pub charged_units: Option<u64>,
    /// Scenario time at which the resource started this prefill.
    pub started_at: f64,
    /// Scenario time at which the first token was available.
    pub completed_at: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("prefill of an empty sequence")]
    EmptySequence,
    #[error("transport failure talking to {resource}: {message}")]
    Transport { resource: ResourceId, message: String },
    #[error("{resource} answered with status {status}: {body}")]
    Protocol {
        resource: ResourceId,
        status: u16,
        body: String,
    },
    #[error("malformed stream from {resource}: {message}")]
    Stream { resource: ResourceId, message: String },
    #[error("{resource} unavailable: {message}")]
    Unavailable { resource: ResourceId, message: String },
}

/// A pair of inference resources that can be asked to prefill a sequence.
///
/// Implementations serialize work per resource; the two resources run
/// independently of each other.
pub trait InferenceBackend: Send + Sync {
    fn prefill(&self, resource: ResourceId, seq: &TokenSeq) -> Result<PrefillResult, BackendError>;

    /// Forgets whatever the resource has cached.
    fn reset(&self, resource: ResourceId);

    /// Time at which the resource's queued work completes (the current time
    /// when idle).
    fn busy_until(&self, resource: ResourceId) -> f64;
}
