//! Metric reports: per-sample delimited rows plus a key/value JSON summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint-space metrics of one generated pair against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub mpjpe_p1: f64,
    pub mpjpe_p2: f64,
    pub mpjie: f64,
    /// MPJIE of the reference pair.
    pub mpjie_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub fingerprint: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub rows: Vec<SampleRow>,
}

impl Report {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Header comments with fingerprint and seed, then one row per sample.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# fingerprint\t{}\n# seed\t{}\n", self.fingerprint, self.seed);
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "# {k}\t{v}");
        }
        out.push_str("id\tmpjpe_p1\tmpjpe_p2\tmpjie\tmpjie_ref\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.id, r.mpjpe_p1, r.mpjpe_p2, r.mpjie, r.mpjie_ref);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let offset = text.lines().take(e.line().saturating_sub(1)).map(|l| l.len() as u64 + 1).sum::<u64>()
                + e.column().saturating_sub(1) as u64;
            Error::format(offset, format!("report: {e}"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut metrics = BTreeMap::new();
        metrics.insert("mpjie".to_string(), 1.125);
        metrics.insert("fid".to_string(), 0.1 + 0.2);
        Report {
            fingerprint: "ab12".into(),
            seed: 42,
            metrics,
            rows: vec![SampleRow { id: "s0".into(), mpjpe_p1: 1.0 / 3.0, mpjpe_p2: 0.0, mpjie: 2.5, mpjie_ref: 2.25 }],
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = sample();
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn tsv_carries_fingerprint_and_seed() {
        let tsv = sample().to_tsv();
        assert!(tsv.starts_with("# fingerprint\tab12\n# seed\t42\n"));
        assert_eq!(tsv.lines().filter(|l| !l.starts_with('#')).count(), 2);
    }

    #[test]
    fn malformed_json_is_format_error() {
        assert!(matches!(Report::from_json("{\"seed\": 1"), Err(Error::Format { .. })));
    }
}
