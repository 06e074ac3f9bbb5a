use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{InferenceBackend, MockBackend};
use crate::clock::VirtualClock;
use crate::context::{CsrContext, EvictionPolicy, StateChunk, TokenSeq};
use crate::cost::{reconciliation_feasibility, HardwareProfile};
use crate::scheduler::{AsrScheduler, ReconcileStep, SchedulerAction, SchedulerConfig};

use super::SimError;

/// Axes of the feasibility sweep. Each point evicts a context of
/// `total_len` tokens down to a fraction `epsilon`, while new state arrives
/// at `token_rate` tokens per second under a memory cap of `n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeasibilityGrid {
    pub epsilons: Vec<f64>,
    pub token_rates: Vec<f64>,
    pub n_maxes: Vec<usize>,
    pub total_lens: Vec<usize>,
    pub chunk_tokens: usize,
    /// Catch-up threshold of the simulated scheduler.
    pub n_catchup: usize,
}

impl Default for FeasibilityGrid {
    fn default() -> Self {
        let n = 110_000;
        FeasibilityGrid {
            epsilons: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            token_rates: vec![0.0, 100.0, 400.0, 1_600.0, 6_400.0],
            n_maxes: [1.01, 1.03, 1.1, 1.3, 2.0]
                .iter()
                .map(|f| (f * n as f64).round() as usize)
                .collect(),
            total_lens: vec![n],
            chunk_tokens: 100,
            n_catchup: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityPoint {
    pub epsilon: f64,
    pub token_rate: f64,
    pub n_max: usize,
    pub total_len: usize,
    pub warmup_time: f64,
    pub recon_time: f64,
    /// Infinite when nothing arrives.
    pub time_to_oom: f64,
    pub slack: f64,
    pub analytic_feasible: bool,
    pub simulated_feasible: bool,
    pub swap_time: Option<f64>,
    pub overflow_time: Option<f64>,
    /// Within one chunk arrival of the analytic boundary.
    pub boundary: bool,
}

impl FeasibilityPoint {
    pub fn agrees(&self) -> bool {
        self.analytic_feasible == self.simulated_feasible
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilitySummary {
    pub points: usize,
    /// Points with `n_max <= total_len`, left out of the grid.
    pub skipped: usize,
    pub boundary: usize,
    pub agree_off_boundary: usize,
    pub disagree_off_boundary: usize,
    pub agree_on_boundary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMap {
    pub points: Vec<FeasibilityPoint>,
    pub summary: FeasibilitySummary,
}

impl FeasibilityMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epsilon,token_rate,n_max,total_len,warmup_time,recon_time,time_to_oom,slack,\
             analytic_feasible,simulated_feasible,boundary\n",
        );
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                p.epsilon,
                p.token_rate,
                p.n_max,
                p.total_len,
                p.warmup_time,
                p.recon_time,
                p.time_to_oom,
                p.slack,
                p.analytic_feasible,
                p.simulated_feasible,
                p.boundary
            )
            .unwrap();
        }
        out
    }
}

pub fn feasibility_map(grid: &FeasibilityGrid, profile: &HardwareProfile) -> Result<FeasibilityMap, SimError> {
    if grid.epsilons.is_empty() || grid.token_rates.is_empty() || grid.n_maxes.is_empty() || grid.total_lens.is_empty()
    {
        return Err(SimError::Config("every feasibility axis needs at least one value".into()));
    }
    if grid.chunk_tokens == 0 {
        return Err(SimError::Config("chunk_tokens must be positive".into()));
    }
    let mut points = Vec::new();
    let mut summary = FeasibilitySummary {
        points: 0,
        skipped: 0,
        boundary: 0,
        agree_off_boundary: 0,
        disagree_off_boundary: 0,
        agree_on_boundary: 0,
    };
    for &total_len in &grid.total_lens {
        for &epsilon in &grid.epsilons {
            for &rate in &grid.token_rates {
                for &n_max in &grid.n_maxes {
                    if n_max <= total_len {
                        summary.skipped += 1;
                        continue;
                    }
                    let p = evaluate(grid, profile, total_len, epsilon, rate, n_max)?;
                    summary.points += 1;
                    match (p.boundary, p.agrees()) {
                        (true, true) => {
                            summary.boundary += 1;
                            summary.agree_on_boundary += 1;
                        }
                        (true, false) => summary.boundary += 1,
                        (false, true) => summary.agree_off_boundary += 1,
                        (false, false) => summary.disagree_off_boundary += 1,
                    }
                    points.push(p);
                }
            }
        }
    }
    Ok(FeasibilityMap { points, summary })
}

fn evaluate(
    grid: &FeasibilityGrid,
    profile: &HardwareProfile,
    total_len: usize,
    epsilon: f64,
    rate: f64,
    n_max: usize,
) -> Result<FeasibilityPoint, SimError> {
    let profile = profile.with_token_rate(rate);
    let report = reconciliation_feasibility(total_len as u64, epsilon, n_max as u64, &profile)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let period = if rate > 0.0 {
        grid.chunk_tokens as f64 / rate
    } else {
        f64::INFINITY
    };
    let sim = simulate_cycle(grid, &profile, total_len, epsilon, period, n_max)?;
    let slack = report.slack();
    Ok(FeasibilityPoint {
        epsilon,
        token_rate: rate,
        n_max,
        total_len,
        warmup_time: report.warmup_time,
        recon_time: report.recon_time,
        time_to_oom: report.time_to_oom.as_f64(),
        slack,
        analytic_feasible: report.feasible,
        simulated_feasible: sim.swap_time.is_some(),
        swap_time: sim.swap_time,
        overflow_time: sim.overflow_time,
        boundary: period.is_finite() && slack.abs() <= period,
    })
}

struct CycleOutcome {
    swap_time: Option<f64>,
    overflow_time: Option<f64>,
}

/// One eviction cycle of the snapshot scheduler: the chunk arriving at t = 0
/// brings the state to `total_len` and triggers the eviction; further chunks
/// arrive every `period` until the swap or the memory cap.
fn simulate_cycle(
    grid: &FeasibilityGrid,
    profile: &HardwareProfile,
    total_len: usize,
    epsilon: f64,
    period: f64,
    n_max: usize,
) -> Result<CycleOutcome, SimError> {
    let chunk = grid.chunk_tokens;
    let whole = total_len / chunk;
    let remainder = total_len % chunk;
    let mut next_token = 0u32;
    let mut take = |n: usize| -> TokenSeq {
        let seq = (next_token..next_token + n as u32).collect();
        next_token += n as u32;
        seq
    };
    let (prefix_len, preloaded) = if whole == 0 { (0, 0) } else { (remainder, whole - 1) };
    let mut ctx = CsrContext::new(take(prefix_len));
    let mut chunk_id = 0;
    for _ in 0..preloaded {
        chunk_id += 1;
        ctx.append_chunk(StateChunk::new(chunk_id, take(chunk), 0.0))?;
    }
    let clock = Arc::new(VirtualClock::new());
    let backend = MockBackend::new(profile, clock.clone());
    let scheduler = AsrScheduler::new(
        SchedulerConfig {
            tau_mem: total_len,
            n_catchup: grid.n_catchup,
            n_max: Some(n_max),
            policy: EvictionPolicy::KeepNewestFraction { fraction: epsilon },
        },
        ctx,
        clock.clone(),
    )?;

    let first = total_len - prefix_len - preloaded * chunk;
    chunk_id += 1;
    let mut job = None;
    for action in scheduler.increment(StateChunk::new(chunk_id, take(first), 0.0))? {
        if let SchedulerAction::LaunchReconcile(j) = action {
            job = Some(j);
        }
    }
    let mut job = job.ok_or_else(|| SimError::Config("eviction did not trigger".into()))?;

    let mut next_background = 0.0;
    let mut arrivals = 0u64;
    loop {
        let next_chunk = (arrivals + 1) as f64 * period;
        if next_background <= next_chunk {
            clock.advance_to(next_background);
            match job.next_step(&scheduler) {
                ReconcileStep::Prefill { resource, seq } => {
                    let r = backend.prefill(resource, &seq)?;
                    job.prefill_succeeded();
                    next_background = r.completed_at;
                }
                ReconcileStep::Swapped => {
                    return Ok(CycleOutcome {
                        swap_time: Some(next_background),
                        overflow_time: None,
                    })
                }
            }
        } else {
            clock.advance_to(next_chunk);
            arrivals += 1;
            chunk_id += 1;
            let actions = scheduler.increment(StateChunk::new(chunk_id, take(chunk), next_chunk))?;
            if actions
                .iter()
                .any(|a| matches!(a, SchedulerAction::OverflowAlarm { .. }))
            {
                return Ok(CycleOutcome {
                    swap_time: None,
                    overflow_time: Some(next_chunk),
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_row_is_feasible() {
        let grid = FeasibilityGrid {
            token_rates: vec![0.0],
            total_lens: vec![20_000],
            n_maxes: vec![20_100, 30_000],
            ..Default::default()
        };
        let map = feasibility_map(&grid, &HardwareProfile::default()).unwrap();
        assert_eq!(map.points.len(), 10);
        for p in &map.points {
            assert!(p.analytic_feasible && p.simulated_feasible);
            assert!(!p.boundary);
        }
    }

    #[test]
    fn hopeless_point_overflows() {
        let grid = FeasibilityGrid {
            epsilons: vec![0.9],
            token_rates: vec![5_000.0],
            n_maxes: vec![20_200],
            total_lens: vec![20_000],
            ..Default::default()
        };
        let map = feasibility_map(&grid, &HardwareProfile::default().rescaled(1e-7)).unwrap();
        let p = &map.points[0];
        assert!(!p.analytic_feasible);
        assert!(!p.simulated_feasible);
        assert!(p.overflow_time.is_some());
    }

    #[test]
    fn skips_caps_below_state() {
        let grid = FeasibilityGrid {
            epsilons: vec![0.5],
            token_rates: vec![0.0],
            n_maxes: vec![10, 30_000],
            total_lens: vec![20_000],
            ..Default::default()
        };
        let map = feasibility_map(&grid, &HardwareProfile::default()).unwrap();
        assert_eq!(map.summary.skipped, 1);
        assert_eq!(map.summary.points, 1);
    }
}
