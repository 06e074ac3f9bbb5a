use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, InferenceBackend, PrefillResult, ResourceCacheState, ResourceId};
use crate::clock::{Clock, VirtualClock};
use crate::context::{first_differing_index, TokenSeq};
use crate::cost::{ttft_units, HardwareProfile};

/// One prefill as seen by the mock, for test assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillCall {
    pub resource: ResourceId,
    pub seq_len: usize,
    pub i_star: u64,
    pub charged_units: u64,
    pub started_at: f64,
    pub completed_at: f64,
}

#[derive(Debug, Default)]
struct Slot {
    cache: ResourceCacheState,
    busy_until: f64,
    fail_next: u32,
}

/// Deterministic backend that models each resource as a single prefix cache
/// holding the most recently prefilled sequence, and charges virtual time
/// with the analytic cost model.
///
/// Each resource is a serial server: a prefill starts at the later of the
/// current virtual time and the end of the resource's previous work.
pub struct MockBackend {
    kappa: f64,
    clock: Arc<VirtualClock>,
    slots: Mutex<[Slot; 2]>,
    calls: Mutex<Vec<PrefillCall>>,
}

impl MockBackend {
    pub fn new(profile: &HardwareProfile, clock: Arc<VirtualClock>) -> Self {
        Self {
            kappa: profile.kappa(),
            clock,
            slots: Mutex::new(Default::default()),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn clock(&self) -> &Arc<VirtualClock> {
        &self.clock
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn cache_state(&self, resource: ResourceId) -> ResourceCacheState {
        self.slots.lock().unwrap()[resource.index()].cache.clone()
    }

    pub fn cached_seq(&self, resource: ResourceId) -> TokenSeq {
        self.cache_state(resource).cached_seq
    }

    /// Every prefill served so far, in issue order.
    pub fn calls(&self) -> Vec<PrefillCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Makes the next `count` prefills on `resource` fail without touching its cache.
    pub fn inject_failures(&self, resource: ResourceId, count: u32) {
        self.slots.lock().unwrap()[resource.index()].fail_next += count;
    }
}

impl InferenceBackend for MockBackend {
    fn prefill(&self, resource: ResourceId, seq: &TokenSeq) -> Result<PrefillResult, BackendError> {
        if seq.is_empty() {
            return Err(BackendError::EmptySequence);
        }
        let now = self.clock.now();
        let mut slots = self.slots.lock().unwrap();
        let slot = &mut slots[resource.index()];
        if slot.fail_next > 0 {
            slot.fail_next -= 1;
            return Err(BackendError::Unavailable {
                resource,
                message: "injected failure".into(),
            });
        }
        let i_star = first_differing_index(&slot.cache.cached_seq, seq) as u64;
        let charged = ttft_units(seq.len() as u64, i_star).expect("i* is within 1..=len+1");
        let ttft = self.kappa * charged as f64;
        let started_at = now.max(slot.busy_until);
        let completed_at = started_at + ttft;
        slot.busy_until = completed_at;
        slot.cache = ResourceCacheState {
            cached_seq: seq.clone(),
            last_prefill_at: started_at,
        };
        drop(slots);
        self.calls.lock().unwrap().push(PrefillCall {
            resource,
            seq_len: seq.len(),
            i_star,
            charged_units: charged,
            started_at,
            completed_at,
        });
        Ok(PrefillResult {
            ttft,
            i_star: Some(i_star),
            charged_units: Some(charged),
            started_at,
            completed_at,
        })
    }

    fn reset(&self, resource: ResourceId) {
        let mut slots = self.slots.lock().unwrap();
        slots[resource.index()].cache.cached_seq = TokenSeq::empty();
    }

    fn busy_until(&self, resource: ResourceId) -> f64 {
        let busy = self.slots.lock().unwrap()[resource.index()].busy_until;
        busy.max(self.clock.now())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_backend() -> MockBackend {
        MockBackend::new(
            &HardwareProfile::with_kappa(1, 1, 1.0, 1.0, 0.0),
            Arc::new(VirtualClock::new()),
        )
    }

    fn seq(n: u32) -> TokenSeq {
        (0..n).collect()
    }

    #[test]
    fn cold_then_repeat_then_extend() {
        let b = unit_backend();
        let r = b.prefill(ResourceId::R1, &seq(100)).unwrap();
        assert_eq!(r.i_star, Some(1));
        assert_eq!(r.charged_units, Some(5050));
        assert_eq!(r.ttft, 5050.0);

        let r = b.prefill(ResourceId::R1, &seq(100)).unwrap();
        assert_eq!(r.i_star, Some(101));
        assert_eq!(r.charged_units, Some(0));

        let r = b.prefill(ResourceId::R1, &seq(110)).unwrap();
        assert_eq!(r.i_star, Some(101));
        assert_eq!(r.charged_units, Some((101..=110).sum::<u64>()));
        assert_eq!(r.charged_units, Some(1055));
    }

    #[test]
    fn reset_forces_cold_prefill() {
        let b = unit_backend();
        b.prefill(ResourceId::R1, &seq(10)).unwrap();
        b.reset(ResourceId::R1);
        b.reset(ResourceId::R1);
        assert!(b.cached_seq(ResourceId::R1).is_empty());
        assert_eq!(b.prefill(ResourceId::R1, &seq(10)).unwrap().i_star, Some(1));
    }

    #[test]
    fn resources_are_isolated() {
        let b = unit_backend();
        b.prefill(ResourceId::R1, &seq(10)).unwrap();
        b.prefill(ResourceId::R2, &seq(20)).unwrap();
        b.reset(ResourceId::R1);
        assert_eq!(b.cached_seq(ResourceId::R2), seq(20));
        assert_eq!(b.prefill(ResourceId::R2, &seq(20)).unwrap().charged_units, Some(0));
    }

    #[test]
    fn busy_until_accumulates() {
        let b = unit_backend();
        assert_eq!(b.busy_until(ResourceId::R1), 0.0);
        b.clock().advance_to(3.0);
        assert_eq!(b.busy_until(ResourceId::R1), 3.0);
        let first = b.prefill(ResourceId::R1, &seq(4)).unwrap();
        assert_eq!(first.completed_at, 3.0 + 10.0);
        let second = b.prefill(ResourceId::R1, &(100..105).collect()).unwrap();
        assert_eq!(second.started_at, 13.0);
        assert_eq!(second.completed_at, 13.0 + 15.0);
        assert_eq!(b.busy_until(ResourceId::R1), 28.0);
        assert_eq!(b.busy_until(ResourceId::R2), 3.0);
    }

    #[test]
    fn empty_sequence_rejected() {
        let b = unit_backend();
        assert_eq!(b.prefill(ResourceId::R1, &TokenSeq::empty()), Err(BackendError::EmptySequence));
    }

    #[test]
    fn injected_failure_leaves_cache() {
        let b = unit_backend();
        b.prefill(ResourceId::R2, &seq(5)).unwrap();
        b.inject_failures(ResourceId::R2, 1);
        assert!(matches!(
            b.prefill(ResourceId::R2, &seq(8)),
            Err(BackendError::Unavailable { .. })
        ));
        assert_eq!(b.cached_seq(ResourceId::R2), seq(5));
        assert!(b.prefill(ResourceId::R2, &seq(8)).is_ok());
    }

    #[test]
    fn identical_streams_are_bit_identical() {
        let run = || {
            let b = unit_backend();
            let mut out = Vec::new();
            for k in 1..30u32 {
                b.clock().advance_to(k as f64 * 7.0);
                let r = ResourceId::ALL[(k % 2) as usize];
                out.push(b.prefill(r, &(0..k * 3).collect()).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }
}
