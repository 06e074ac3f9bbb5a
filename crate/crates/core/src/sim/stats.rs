use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SimError, TtftTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsOptions {
    /// A sample is a spike when it exceeds this multiple of the trailing median.
    pub spike_multiple: f64,
    /// Number of preceding samples in the trailing median.
    pub window: usize,
    /// Leave cycle 0 (the initial fill) out of the drift figure.
    pub skip_initial_cycle: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            spike_multiple: 3.0,
            window: 30,
            skip_initial_cycle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: u64,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub query_index: u64,
    pub scenario_time: f64,
    pub cycle: u64,
    pub ttft_seconds: f64,
    pub trailing_median: f64,
}

impl Spike {
    pub fn excess(&self) -> f64 {
        self.ttft_seconds - self.trailing_median
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
    pub per_cycle: Vec<CycleSummary>,
    /// `(max - min) / min` over per-cycle medians; `None` with fewer than two cycles.
    pub median_drift: Option<f64>,
    pub spikes: Vec<Spike>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn trace_stats(trace: &TtftTrace, opts: &StatsOptions) -> Result<TraceStats, SimError> {
    let values = trace.ttfts();
    if values.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);

    let mut by_cycle: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in &trace.samples {
        by_cycle.entry(s.eviction_cycle_index).or_default().push(s.ttft_seconds);
    }
    let per_cycle: Vec<CycleSummary> = by_cycle
        .iter()
        .map(|(&cycle, v)| CycleSummary {
            cycle,
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: median(v),
            max: v.iter().copied().fold(f64::MIN, f64::max),
        })
        .collect();
    let medians: Vec<f64> = per_cycle
        .iter()
        .filter(|c| !(opts.skip_initial_cycle && c.cycle == 0))
        .map(|c| c.median)
        .collect();
    let median_drift = (medians.len() >= 2).then(|| {
        let lo = medians.iter().copied().fold(f64::MAX, f64::min);
        let hi = medians.iter().copied().fold(f64::MIN, f64::max);
        (hi - lo) / lo
    });

    let mut spikes = Vec::new();
    for (i, s) in trace.samples.iter().enumerate() {
        if i == 0 {
            continue;
        }
        let window = &values[i.saturating_sub(opts.window)..i];
        let trailing = median(window);
        if s.ttft_seconds > opts.spike_multiple * trailing {
            spikes.push(Spike {
                query_index: s.query_index,
                scenario_time: s.scenario_time,
                cycle: s.eviction_cycle_index,
                ttft_seconds: s.ttft_seconds,
                trailing_median: trailing,
            });
        }
    }

    Ok(TraceStats {
        count: values.len(),
        mean,
        std,
        p50: percentile(&sorted, 50.0),
        p99: percentile(&sorted, 99.0),
        max: sorted[sorted.len() - 1],
        per_cycle,
        median_drift,
        spikes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ResourceId;
    use crate::sim::{SampleCase, TtftSample};
    use proptest::prelude::*;

    fn trace_of(values: &[f64]) -> TtftTrace {
        TtftTrace {
            samples: values
                .iter()
                .enumerate()
                .map(|(i, &v)| TtftSample {
                    query_index: i as u64,
                    scenario_time: i as f64,
                    ttft_seconds: v,
                    service_seconds: v,
                    routing_case: SampleCase::Continuation,
                    eviction_cycle_index: (i / 10) as u64,
                    resource: ResourceId::R1,
                    seq_len: 1,
                    static_len: 0,
                    charged_units: None,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(
            trace_stats(&TtftTrace::default(), &StatsOptions::default()),
            Err(SimError::EmptyTrace)
        ));
    }

    #[test]
    fn constant_trace() {
        let st = trace_stats(&trace_of(&[0.25; 50]), &StatsOptions::default()).unwrap();
        assert_eq!(st.std, 0.0);
        assert_eq!(st.p99, st.mean);
        assert!(st.spikes.is_empty());
        assert_eq!(st.median_drift, Some(0.0));
        assert_eq!(st.per_cycle.len(), 5);
    }

    #[test]
    fn single_outlier() {
        let mut v = vec![0.3; 60];
        v[40] = 3.0;
        let st = trace_stats(&trace_of(&v), &StatsOptions::default()).unwrap();
        assert_eq!(st.spikes.len(), 1);
        assert_eq!(st.spikes[0].query_index, 40);
        assert!((st.spikes[0].excess() - 2.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn percentiles_match_sort_oracle(v in prop::collection::vec(0.0f64..10.0, 1..300)) {
            let st = trace_stats(&trace_of(&v), &StatsOptions::default()).unwrap();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            // Smallest value with at least p% of samples at or below it.
            let oracle = |p: f64| {
                sorted
                    .iter()
                    .copied()
                    .find(|x| sorted.iter().filter(|y| *y <= x).count() as f64 >= p / 100.0 * n as f64)
                    .unwrap()
            };
            prop_assert_eq!(st.p50, oracle(50.0));
            prop_assert_eq!(st.p99, oracle(99.0));
            prop_assert_eq!(st.max, sorted[n - 1]);
        }
    }
}
