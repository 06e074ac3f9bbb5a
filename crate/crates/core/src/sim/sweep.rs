use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{InferenceBackend, MockBackend, ResourceId};
use crate::clock::VirtualClock;
use crate::context::TokenSeq;
use crate::cost::HardwareProfile;

use super::{SimError, FRESH_TOKEN_BASE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `unordered` or `M=<m>`.
    pub label: String,
    pub m: Option<usize>,
    /// TTFT in seconds, one per static length.
    pub ttft: Vec<f64>,
    pub charged_units: Vec<u64>,
}

/// Latency grid laid out with one column per static length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub n_values: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn unordered(&self) -> &SweepRow {
        &self.rows[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for n in &self.n_values {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for v in &row.ttft {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// For each static length `N`: a cold prefill of `N` tokens (the unordered
/// row), then one query per `M` that extends the warm static state with `M`
/// never-seen dynamic tokens.
pub fn sweep_latency(n_values: &[usize], m_values: &[usize], profile: &HardwareProfile) -> Result<SweepTable, SimError> {
    if n_values.is_empty() || m_values.is_empty() {
        return Err(SimError::Config("sweep needs at least one N and one M".into()));
    }
    if n_values.contains(&0) {
        return Err(SimError::Config("static lengths must be positive".into()));
    }
    profile.validate().map_err(|e| SimError::Config(e.to_string()))?;

    let mut rows = vec![SweepRow {
        label: "unordered".into(),
        m: None,
        ttft: Vec::new(),
        charged_units: Vec::new(),
    }];
    rows.extend(m_values.iter().map(|&m| SweepRow {
        label: format!("M={m}"),
        m: Some(m),
        ttft: Vec::new(),
        charged_units: Vec::new(),
    }));

    let mut fresh = FRESH_TOKEN_BASE;
    for &n in n_values {
        let backend = MockBackend::new(profile, std::sync::Arc::new(VirtualClock::new()));
        let static_part: TokenSeq = (0..n as u32).collect();
        let cold = backend.prefill(ResourceId::R1, &static_part)?;
        rows[0].ttft.push(cold.ttft);
        rows[0].charged_units.push(cold.charged_units.unwrap_or(0));
        for (row, &m) in rows[1..].iter_mut().zip(m_values) {
            let mut seq = static_part.clone();
            seq.extend_from_slice(&(fresh..fresh + m as u32).collect::<Vec<_>>());
            fresh += m as u32;
            let r = backend.prefill(ResourceId::R1, &seq)?;
            row.ttft.push(r.ttft);
            row.charged_units.push(r.charged_units.unwrap_or(0));
        }
    }
    Ok(SweepTable {
        n_values: n_values.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ttft_units;

    #[test]
    fn m_zero_is_free() {
        let t = sweep_latency(&[1_000, 5_000], &[0, 16], &HardwareProfile::default()).unwrap();
        assert_eq!(t.row("M=0").unwrap().ttft, vec![0.0, 0.0]);
        assert_eq!(
            t.row("M=16").unwrap().charged_units,
            vec![ttft_units(1_016, 1_001).unwrap(), ttft_units(5_016, 5_001).unwrap()]
        );
        assert_eq!(t.unordered().charged_units[1], ttft_units(5_000, 1).unwrap());
    }

    #[test]
    fn csv_layout() {
        let t = sweep_latency(&[10, 20], &[1], &HardwareProfile::with_kappa(1, 1, 1.0, 1.0, 0.0)).unwrap();
        assert_eq!(t.to_csv(), "row,10,20\nunordered,55,210\nM=1,11,21\n");
    }

    #[test]
    fn rejects_empty_lists() {
        assert!(sweep_latency(&[], &[1], &HardwareProfile::default()).is_err());
        assert!(sweep_latency(&[1], &[], &HardwareProfile::default()).is_err());
    }
}
