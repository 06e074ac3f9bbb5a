use serde::{Deserialize, Serialize};

use crate::context::EvictionPolicy;
use crate::cost::HardwareProfile;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulated,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Versioned queries through the router; eviction reconciled on the
    /// secondary in the background.
    #[default]
    CsrAsr,
    /// Snapshot scheduler: the live state and the catch-up buffer are kept
    /// server side and the scheduler swaps on its own.
    CsrAsrScheduler,
    /// Eviction applied in place on the primary; the next query pays the
    /// full recomputation.
    CsrSyncEvict,
    /// Every query starts with a fresh token, so nothing is ever reused.
    UnorderedBaseline,
}

/// When a scenario stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Run through the initial fill and then this many full eviction cycles;
    /// stops right before the next eviction would fire.
    Cycles(u32),
    /// Scenario seconds.
    Duration(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub chunk_tokens: usize,
    /// Seconds between state chunks.
    pub arrival_period: f64,
    /// Seconds between queries.
    pub query_period: f64,
    pub prefix_tokens: usize,
    pub suffix_tokens: usize,
    pub task_tokens: usize,
    pub tau_mem: usize,
    pub n_max: usize,
    pub n_catchup: usize,
    pub eviction_policy: EvictionPolicy,
    pub profile: HardwareProfile,
    pub horizon: Horizon,
    pub mode: Mode,
    pub policy: Policy,
    pub seed: u64,
    pub vocab_size: u32,
    /// Straggler rejection for the router, in seconds.
    pub max_straggler_age: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            chunk_tokens: 100,
            arrival_period: 1.0,
            query_period: 1.0,
            prefix_tokens: 512,
            suffix_tokens: 32,
            task_tokens: 32,
            tau_mem: 110_000,
            n_max: 131_072,
            n_catchup: 500,
            eviction_policy: EvictionPolicy::OldestHalf,
            profile: HardwareProfile::default(),
            horizon: Horizon::Cycles(10),
            mode: Mode::Simulated,
            policy: Policy::CsrAsr,
            seed: 0,
            vocab_size: 32_000,
            max_straggler_age: None,
        }
    }
}

impl ScenarioConfig {
    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    /// Dynamic tokens per query.
    pub fn dynamic_tokens(&self) -> usize {
        self.suffix_tokens + self.task_tokens
    }

    /// Static tokens per second.
    pub fn token_rate(&self) -> f64 {
        self.chunk_tokens as f64 / self.arrival_period
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.chunk_tokens == 0 {
            return bad("chunk_tokens must be positive".into());
        }
        if !(self.arrival_period > 0.0) || !(self.query_period > 0.0) {
            return bad("arrival_period and query_period must be positive".into());
        }
        if self.tau_mem == 0 || self.n_catchup == 0 {
            return bad("tau_mem and n_catchup must be positive".into());
        }
        if self.tau_mem >= self.n_max {
            return bad(format!("tau_mem ({}) must be below n_max ({})", self.tau_mem, self.n_max));
        }
        if self.prefix_tokens >= self.tau_mem {
            return bad("prefix_tokens must be below tau_mem".into());
        }
        if self.vocab_size == 0 || self.vocab_size >= super::FRESH_TOKEN_BASE {
            return bad(format!("vocab_size must lie in 1..{}", super::FRESH_TOKEN_BASE));
        }
        match self.horizon {
            Horizon::Duration(d) if !(d >= 0.0) => return bad("duration must be non-negative".into()),
            _ => {}
        }
        self.eviction_policy
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.profile
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }
}
