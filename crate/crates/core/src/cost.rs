//! Analytic prefill cost model.
//!
//! Prefilling positions `i* ..= n` of a causal transformer costs work
//! proportional to `Σ i` over those positions (each token attends to all
//! preceding ones). Every latency in this crate is that sum, in "summation
//! units", scaled by a single per-hardware constant κ seconds per unit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("first differing index {i_star} outside 1..={max} for a sequence of {seq_len} tokens", max = seq_len + 1)]
    IndexOutOfRange { seq_len: u64, i_star: u64 },
    #[error("{name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("increment of {delta} tokens must lie strictly between 0 and the sequence length {seq_len}")]
    InvalidIncrement { seq_len: u64, delta: u64 },
    #[error("retained fraction must lie in (0, 1], got {0}")]
    InvalidRetention(f64),
    #[error("context of {total_len} tokens already exceeds the memory cap of {n_max} tokens")]
    AlreadyOverflowed { total_len: u64, n_max: u64 },
    #[error("calibration needs at least one anchor with non-zero cost")]
    EmptyCalibration,
    #[error("anchor `{0}` needs a static length for a warm measurement")]
    MissingStaticLen(String),
}

/// `Σ_{i = i_star}^{seq_len} i`, the prefill work for positions `i_star..=seq_len`.
///
/// `i_star == seq_len + 1` is a perfect cache hit and costs nothing.
pub fn ttft_units(seq_len: u64, i_star: u64) -> Result<u64, CostError> {
    if i_star < 1 || i_star > seq_len + 1 {
        return Err(CostError::IndexOutOfRange { seq_len, i_star });
    }
    let n = seq_len as u128;
    let i = i_star as u128;
    let units = (n + 1 - i) * (n + i) / 2;
    Ok(u64::try_from(units).expect("summation units overflow u64"))
}

/// Real-valued extension of [`ttft_units`] used where token counts are
/// themselves derived quantities (retained fractions, arrival rates).
pub fn ttft_units_f64(seq_len: f64, i_star: f64) -> f64 {
    (seq_len - i_star + 1.0) * (seq_len + i_star) / 2.0
}

/// Hardware constants of one inference resource.
///
/// κ = `cost_per_op · layers · hidden_dim` converts summation units to seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub layers: u32,
    pub hidden_dim: u32,
    /// Seconds per operation unit.
    pub cost_per_op: f64,
    /// Operations per second.
    pub device_flops: f64,
    /// Tokens per second appended to the active context.
    pub token_rate: f64,
}

impl Default for HardwareProfile {
    /// A 64-layer, 5120-wide model whose κ reproduces a 14.67 s cold prefill
    /// of 120 000 tokens.
    fn default() -> Self {
        let anchor = ttft_units(120_000, 1).unwrap() as f64;
        HardwareProfile::with_kappa(64, 5120, 14.67 / anchor, 1.0e15, 100.0)
    }
}

impl HardwareProfile {
    /// Builds a profile whose per-op cost is derived from a fitted κ.
    pub fn with_kappa(layers: u32, hidden_dim: u32, kappa: f64, device_flops: f64, token_rate: f64) -> Self {
        HardwareProfile {
            layers,
            hidden_dim,
            cost_per_op: kappa / (layers as f64 * hidden_dim as f64),
            device_flops,
            token_rate,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.cost_per_op * self.layers as f64 * self.hidden_dim as f64
    }

    /// Returns a copy re-scaled to the given κ, keeping the architecture fixed.
    pub fn rescaled(&self, kappa: f64) -> Self {
        HardwareProfile::with_kappa(self.layers, self.hidden_dim, kappa, self.device_flops, self.token_rate)
    }

    pub fn with_token_rate(mut self, token_rate: f64) -> Self {
        self.token_rate = token_rate;
        self
    }

    /// Every constant must be strictly positive, except the token rate which
    /// may be zero (no arrivals).
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("layers", self.layers as f64),
            ("hidden_dim", self.hidden_dim as f64),
            ("cost_per_op", self.cost_per_op),
            ("device_flops", self.device_flops),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(CostError::NonPositive { name, value });
            }
        }
        if !(self.token_rate >= 0.0) || !self.token_rate.is_finite() {
            return Err(CostError::NonPositive {
                name: "token_rate",
                value: self.token_rate,
            });
        }
        Ok(())
    }
}

pub fn ttft_seconds(seq_len: u64, i_star: u64, profile: &HardwareProfile) -> Result<f64, CostError> {
    Ok(profile.kappa() * ttft_units(seq_len, i_star)? as f64)
}

/// Operation budget available within a deadline: `tau_max · f_hw`.
pub fn flops_budget(tau_max: f64, f_hw: f64) -> Result<f64, CostError> {
    if !(tau_max > 0.0) {
        return Err(CostError::NonPositive {
            name: "tau_max",
            value: tau_max,
        });
    }
    if !(f_hw > 0.0) {
        return Err(CostError::NonPositive { name: "f_hw", value: f_hw });
    }
    Ok(tau_max * f_hw)
}

/// Smallest first-differing index whose prefill fits within `tau_max` seconds.
///
/// Cost is strictly decreasing in `i*` and a perfect hit is free, so the
/// answer always lies in `1..=seq_len + 1`.
pub fn min_stable_prefix(seq_len: u64, profile: &HardwareProfile, tau_max: f64) -> u64 {
    let kappa = profile.kappa();
    let fits = |i: u64| kappa * ttft_units(seq_len, i).unwrap() as f64 <= tau_max;
    if !fits(seq_len + 1) {
        return seq_len + 2;
    }
    let (mut lo, mut hi) = (1u64, seq_len + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Cold prefill over incremental prefill, in exact summation units.
    pub exact: f64,
    /// The `seq_len / delta` estimate.
    pub approximation: f64,
}

/// Cost ratio of recomputing `seq_len` tokens from scratch versus extending a
/// cached prefix by `delta` tokens.
pub fn speedup_ratio(seq_len: u64, delta: u64) -> Result<Speedup, CostError> {
    if delta == 0 || delta >= seq_len {
        return Err(CostError::InvalidIncrement { seq_len, delta });
    }
    let cold = ttft_units(seq_len, 1)? as f64;
    let incremental = ttft_units(seq_len, seq_len - delta + 1)? as f64;
    Ok(Speedup {
        exact: cold / incremental,
        approximation: seq_len as f64 / delta as f64,
    })
}

/// Seconds until a bound is hit; unbounded when nothing ever arrives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBound {
    Finite(f64),
    Unbounded,
}

impl TimeBound {
    pub fn admits(&self, seconds: f64) -> bool {
        match *self {
            TimeBound::Finite(limit) => seconds <= limit,
            TimeBound::Unbounded => true,
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            TimeBound::Finite(v) => v,
            TimeBound::Unbounded => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub warmup_time: f64,
    pub recon_time: f64,
    pub time_to_oom: TimeBound,
    /// Tokens that arrive while the evicted state warms up.
    pub delta_n: f64,
    pub feasible: bool,
}

impl FeasibilityReport {
    /// `time_to_oom - (warmup_time + recon_time)`; positive when feasible.
    pub fn slack(&self) -> f64 {
        self.time_to_oom.as_f64() - (self.warmup_time + self.recon_time)
    }
}

/// Checks whether warming up and catching up an evicted context finishes
/// before the live context runs out of memory.
///
/// * warm-up: cold prefill of `epsilon · total_len` tokens;
/// * catch-up: extending that prefix by the `ΔN = Ẋ · warmup` tokens that
///   arrived meanwhile;
/// * time to OOM: `(n_max - total_len) / Ẋ`.
pub fn reconciliation_feasibility(
    total_len: u64,
    epsilon: f64,
    n_max: u64,
    profile: &HardwareProfile,
) -> Result<FeasibilityReport, CostError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(CostError::InvalidRetention(epsilon));
    }
    if total_len > n_max {
        return Err(CostError::AlreadyOverflowed { total_len, n_max });
    }
    let kappa = profile.kappa();
    let rate = profile.token_rate;
    let retained = epsilon * total_len as f64;
    let warmup_time = kappa * ttft_units_f64(retained, 1.0);
    let delta_n = rate * warmup_time;
    let recon_time = kappa * delta_n * (2.0 * retained + delta_n + 1.0) / 2.0;
    let time_to_oom = if rate > 0.0 {
        TimeBound::Finite((n_max - total_len) as f64 / rate)
    } else {
        TimeBound::Unbounded
    };
    Ok(FeasibilityReport {
        warmup_time,
        recon_time,
        time_to_oom,
        delta_n,
        feasible: time_to_oom.admits(warmup_time + recon_time),
    })
}

/// How an anchor's first differing index was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IStarMode {
    /// Nothing cached: `i* = 1`.
    Cold,
    /// `static_len` tokens cached: `i* = static_len + 1`.
    Warm,
}

/// One measured latency used to fit κ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchor {
    #[serde(default)]
    pub label: Option<String>,
    pub seq_len: u64,
    pub i_star_mode: IStarMode,
    #[serde(default)]
    pub static_len: Option<u64>,
    pub measured_seconds: f64,
}

impl CalibrationAnchor {
    pub fn units(&self) -> Result<u64, CostError> {
        let i_star = match self.i_star_mode {
            IStarMode::Cold => 1,
            IStarMode::Warm => {
                let label = self.label.clone().unwrap_or_else(|| format!("seq_len={}", self.seq_len));
                self.static_len.ok_or(CostError::MissingStaticLen(label))? + 1
            }
        };
        ttft_units(self.seq_len, i_star)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFixture {
    #[serde(default)]
    pub note: Option<String>,
    pub anchors: Vec<CalibrationAnchor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResidual {
    pub label: Option<String>,
    pub units: u64,
    pub measured_seconds: f64,
    pub predicted_seconds: f64,
    pub residual_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa: f64,
    pub residuals: Vec<AnchorResidual>,
}

/// Least-squares fit of `seconds = κ · units` through the origin.
///
/// With a single anchor the fit reproduces that anchor exactly.
pub fn calibrate_kappa(anchors: &[CalibrationAnchor]) -> Result<Calibration, CostError> {
    let units = anchors.iter().map(|a| a.units()).collect::<Result<Vec<_>, _>>()?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (a, &u) in anchors.iter().zip(&units) {
        let u = u as f64;
        num += u * a.measured_seconds;
        den += u * u;
    }
    if den == 0.0 {
        return Err(CostError::EmptyCalibration);
    }
    let kappa = num / den;
    if !(kappa > 0.0) {
        return Err(CostError::NonPositive { name: "kappa", value: kappa });
    }
    let residuals = anchors
        .iter()
        .zip(&units)
        .map(|(a, &u)| {
            let predicted = kappa * u as f64;
            AnchorResidual {
                label: a.label.clone(),
                units: u,
                measured_seconds: a.measured_seconds,
                predicted_seconds: predicted,
                residual_seconds: a.measured_seconds - predicted,
            }
        })
        .collect();
    Ok(Calibration { kappa, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(n: u64, i_star: u64) -> u64 {
        (i_star..=n).sum()
    }

    fn unit_profile() -> HardwareProfile {
        HardwareProfile::with_kappa(1, 1, 1.0, 1.0e12, 0.0)
    }

    #[test]
    fn ttft_units_examples() {
        assert_eq!(ttft_units(10, 11).unwrap(), 0);
        assert_eq!(ttft_units(10, 1).unwrap(), 55);
        assert_eq!(ttft_units(10, 6).unwrap(), 40);
        assert_eq!(brute(10, 6), 40);
        assert_eq!(ttft_units(0, 1).unwrap(), 0);
    }

    #[test]
    fn ttft_units_rejects_out_of_range() {
        assert!(matches!(ttft_units(10, 0), Err(CostError::IndexOutOfRange { .. })));
        assert!(matches!(ttft_units(10, 12), Err(CostError::IndexOutOfRange { .. })));
    }

    #[test]
    fn ttft_units_matches_summation_small() {
        for n in 0..200 {
            for i in 1..=n + 1 {
                assert_eq!(ttft_units(n, i).unwrap(), brute(n, i), "n={n} i={i}");
            }
        }
    }

    #[test]
    fn ttft_units_monotone() {
        for n in 1..100u64 {
            for i in 1..=n {
                assert!(ttft_units(n, i).unwrap() > ttft_units(n, i + 1).unwrap());
                assert!(ttft_units(n + 1, i).unwrap() > ttft_units(n, i).unwrap());
            }
        }
    }

    #[test]
    fn ttft_seconds_scales_with_kappa() {
        let p = unit_profile();
        assert_eq!(ttft_seconds(10, 1, &p).unwrap(), 55.0);
        let doubled = p.rescaled(2.0);
        assert_eq!(ttft_seconds(10, 1, &doubled).unwrap(), 110.0);
    }

    #[test]
    fn calibrated_kappa_reproduces_its_anchor() {
        let anchor = CalibrationAnchor {
            label: Some("cold-120k".into()),
            seq_len: 120_000,
            i_star_mode: IStarMode::Cold,
            static_len: None,
            measured_seconds: 14.67,
        };
        let cal = calibrate_kappa(std::slice::from_ref(&anchor)).unwrap();
        assert!((cal.kappa - 14.67 / ttft_units(120_000, 1).unwrap() as f64).abs() < 1e-24);
        let p = HardwareProfile::default().rescaled(cal.kappa);
        let reproduced = ttft_seconds(120_000, 1, &p).unwrap();
        assert!((reproduced - 14.67).abs() < 1e-9);
        assert!(cal.residuals[0].residual_seconds.abs() < 1e-9);
    }

    #[test]
    fn calibration_requires_static_len_for_warm() {
        let anchor = CalibrationAnchor {
            label: None,
            seq_len: 100,
            i_star_mode: IStarMode::Warm,
            static_len: None,
            measured_seconds: 1.0,
        };
        assert!(matches!(calibrate_kappa(&[anchor]), Err(CostError::MissingStaticLen(_))));
        assert_eq!(calibrate_kappa(&[]), Err(CostError::EmptyCalibration));
    }

    #[test]
    fn flops_budget_examples() {
        assert_eq!(flops_budget(0.5, 1e12).unwrap(), 5e11);
        assert_eq!(flops_budget(0.25, 2e12).unwrap(), flops_budget(0.5, 1e12).unwrap());
        assert!(flops_budget(0.0, 1e12).is_err());
        assert!(flops_budget(1.0, -1.0).is_err());
    }

    #[test]
    fn budget_decides_admissibility() {
        // κ = 1 s/unit and one op per unit: a budget of 55 ops admits a cold
        // 10-token prefill (55 units) but not an 11-token one (66 units).
        let budget = flops_budget(55.0, 1.0).unwrap();
        let p = unit_profile();
        assert!(ttft_seconds(10, 1, &p).unwrap() <= budget);
        assert!(ttft_seconds(11, 1, &p).unwrap() > budget);
    }

    #[test]
    fn min_stable_prefix_limits() {
        let p = unit_profile();
        assert_eq!(min_stable_prefix(1000, &p, 1e12), 1);
        assert_eq!(min_stable_prefix(1000, &p, 0.0), 1001);
        // 10 tokens, budget 40 units: i*=6 costs exactly 40.
        assert_eq!(min_stable_prefix(10, &p, 40.0), 6);
    }

    #[test]
    fn min_stable_prefix_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let n = rng.gen_range(1..3000u64);
            let kappa = rng.gen_range(0.001..2.0);
            let tau = rng.gen_range(0.0..(n * n) as f64);
            let p = HardwareProfile::with_kappa(1, 1, kappa, 1.0, 0.0);
            let scan = (1..=n + 1)
                .find(|&i| kappa * brute(n, i) as f64 <= tau)
                .unwrap();
            assert_eq!(min_stable_prefix(n, &p, tau), scan, "n={n} kappa={kappa} tau={tau}");
        }
    }

    #[test]
    fn speedup_ratio_values() {
        let s = speedup_ratio(100_000, 1_000).unwrap();
        assert_eq!(s.approximation, 100.0);
        // Direct evaluation: 5000050000 / 99500500.
        let expected = 5_000_050_000.0 / 99_500_500.0;
        assert!((s.exact - expected).abs() < 1e-9);
        assert!((s.exact - 50.2515).abs() < 1e-3);

        let tail = speedup_ratio(1000, 999).unwrap();
        // Σ1..1000 over Σ2..1000.
        assert!((tail.exact - 500_500.0 / 500_499.0).abs() < 1e-12);
        assert!((tail.approximation - 1000.0 / 999.0).abs() < 1e-12);

        assert!(speedup_ratio(10, 10).is_err());
        assert!(speedup_ratio(10, 0).is_err());
    }

    #[test]
    fn speedup_grows_without_bound() {
        let mut last = 0.0;
        for n in [1_000u64, 10_000, 100_000, 1_000_000] {
            let s = speedup_ratio(n, 10).unwrap().exact;
            assert!(s > last);
            last = s;
        }
        assert!(last > 40_000.0);
    }

    #[test]
    fn feasibility_without_arrivals() {
        let p = HardwareProfile::default().with_token_rate(0.0);
        let r = reconciliation_feasibility(110_000, 0.5, 131_072, &p).unwrap();
        assert_eq!(r.delta_n, 0.0);
        assert_eq!(r.recon_time, 0.0);
        assert_eq!(r.time_to_oom, TimeBound::Unbounded);
        assert!(r.feasible);
    }

    #[test]
    fn feasibility_small_epsilon_vanishes() {
        let p = HardwareProfile::default();
        let r = reconciliation_feasibility(110_000, 1e-9, 110_001, &p).unwrap();
        assert!(r.warmup_time < 1e-12);
        assert!(r.recon_time < 1e-12);
        assert!(r.feasible);
    }

    #[test]
    fn feasibility_reference_scenario() {
        // Evaluated independently in a scratch script:
        // κ = 14.67 / Σ1..120000, Ẋ = 100 tok/s, |T| = 110000, ε = 0.5, N_max = 131072.
        let p = HardwareProfile::default();
        assert!((p.kappa() - 2.037483020974825e-09).abs() < 1e-20);
        let r = reconciliation_feasibility(110_000, 0.5, 131_072, &p).unwrap();
        assert!((r.warmup_time - 3.0817491000074995).abs() < 1e-9);
        assert!((r.delta_n - 308.17491000074995).abs() < 1e-6);
        assert!((r.recon_time - 0.03463162870418084).abs() < 1e-9);
        assert_eq!(r.time_to_oom, TimeBound::Finite(210.72));
        assert!(r.feasible);
    }

    #[test]
    fn feasibility_errors() {
        let p = HardwareProfile::default();
        assert!(matches!(
            reconciliation_feasibility(200, 0.5, 100, &p),
            Err(CostError::AlreadyOverflowed { .. })
        ));
        assert!(reconciliation_feasibility(100, 0.0, 200, &p).is_err());
        assert!(reconciliation_feasibility(100, 1.5, 200, &p).is_err());
    }

    #[test]
    fn profile_validation() {
        assert!(HardwareProfile::default().validate().is_ok());
        let mut p = HardwareProfile::default();
        p.cost_per_op = 0.0;
        assert!(p.validate().is_err());
        let p = HardwareProfile::default().with_token_rate(-1.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn report_serializes_unbounded() {
        let p = HardwareProfile::default().with_token_rate(0.0);
        let r = reconciliation_feasibility(1000, 0.5, 2000, &p).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"unbounded\""), "{json}");
    }
}
