//! Machine-readable experiment reports.
//!
//! Reports are append-only rows keyed by (condition, variant, attack,
//! strategy, alpha, lambda); duplicate keys are rejected so every row of a
//! run is addressable. Serialization is JSON-lines plus a summary JSON, and
//! merge rows export to a plot-ready CSV. Reports carry no timestamps, so a
//! re-run with the same seeds is digest-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::toy_lm::EvalMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Untouched model (no fingerprint).
    Clean,
    /// Fingerprinted base model.
    Base,
    /// Downstream model with the fingerprint injected by fine-tuning.
    Direct,
    /// Downstream model with the fingerprint vector added post hoc.
    Transfer,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Base => "base",
            Condition::Direct => "direct",
            Condition::Transfer => "transfer",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: Condition,
    /// Downstream model label, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Attack descriptor, `"none"` for unattacked rows.
    pub attack: String,
    /// Merge strategy for merge-attack rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Merge ratio for merge-attack rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Scaling coefficient for transfer rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub fsr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harmlessness: Option<EvalMetrics>,
}

impl ReportRow {
    pub fn new(condition: Condition, attack: impl Into<String>, fsr: f64) -> Self {
        ReportRow {
            condition,
            variant: None,
            attack: attack.into(),
            strategy: None,
            alpha: None,
            lambda: None,
            fsr,
            harmlessness: None,
        }
    }

    fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.condition,
            self.variant.as_deref().unwrap_or("-"),
            self.attack,
            self.strategy.as_deref().unwrap_or("-"),
            self.alpha.map_or("-".to_string(), |a| format!("{a}")),
            self.lambda.map_or("-".to_string(), |l| format!("{l}")),
        )
    }
}

/// Rows plus the provenance (digests, seeds, spec hashes) needed to re-run
/// them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub provenance: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row; the row key must be unique within the report.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        let key = row.key();
        if self.rows.iter().any(|r| r.key() == key) {
            return Err(Error::Argument(format!("duplicate report row '{key}'")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn record_provenance(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.provenance.insert(key.into(), value.into());
    }

    /// Absorb another report's rows and provenance.
    pub fn extend(&mut self, other: &ExperimentReport) -> Result<()> {
        for row in &other.rows {
            self.push(row.clone())?;
        }
        for (k, v) in &other.provenance {
            self.provenance.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    pub fn find(&self, condition: Condition, variant: Option<&str>, attack: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.condition == condition && r.variant.as_deref() == variant && r.attack == attack
        })
    }

    /// Rows as JSON-lines (one row per line).
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write_records(path.as_ref(), &self.rows)
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Plot-ready CSV of the merge-attack rows: strategy, alpha, condition,
    /// fsr.
    pub fn merge_csv(&self) -> String {
        let mut out = String::from("strategy,alpha,condition,fsr\n");
        for row in &self.rows {
            if let (Some(strategy), Some(alpha)) = (&row.strategy, row.alpha) {
                out.push_str(&format!("{strategy},{alpha},{},{}\n", row.condition, row.fsr));
            }
        }
        out
    }

    /// Content hash of the full serialized report; equal digests mean equal
    /// rows and provenance.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_jsonl()?.as_bytes());
        hasher.update(serde_json::to_string(&self.provenance)?.as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Kendall rank correlation (tau-b, tie-corrected). Returns 0 when either
/// sequence is constant.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "kendall_tau needs paired samples");
    let n = xs.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = concordant + discordant;
    let denom = (((n0 + ties_x) as f64) * ((n0 + ties_y) as f64)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_rows_are_rejected() {
        let mut report = ExperimentReport::new();
        let row = ReportRow::new(Condition::Base, "none", 1.0);
        report.push(row.clone()).unwrap();
        assert!(report.push(row).is_err());

        let mut with_variant = ReportRow::new(Condition::Base, "none", 1.0);
        with_variant.variant = Some("copy".into());
        report.push(with_variant).unwrap();
    }

    #[test]
    fn merge_csv_selects_merge_rows_only() {
        let mut report = ExperimentReport::new();
        report.push(ReportRow::new(Condition::Direct, "none", 1.0)).unwrap();
        let mut merge_row = ReportRow::new(Condition::Direct, "merge", 0.875);
        merge_row.strategy = Some("ties".into());
        merge_row.alpha = Some(0.3);
        report.push(merge_row).unwrap();
        let csv = report.merge_csv();
        assert_eq!(csv, "strategy,alpha,condition,fsr\nties,0.3,direct,0.875\n");
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let mut a = ExperimentReport::new();
        a.push(ReportRow::new(Condition::Clean, "none", 0.0)).unwrap();
        a.record_provenance("seed", "7");
        let mut b = ExperimentReport::new();
        b.push(ReportRow::new(Condition::Clean, "none", 0.0)).unwrap();
        b.record_provenance("seed", "7");
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.record_provenance("seed", "8");
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut report = ExperimentReport::new();
        let mut row = ReportRow::new(Condition::Transfer, "none", 0.75);
        row.lambda = Some(1.0);
        row.variant = Some("copy".into());
        report.push(row).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        report.write_jsonl(&path).unwrap();
        let rows: Vec<ReportRow> = crate::jsonl::read_records(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].lambda, Some(1.0));
        assert_eq!(rows[0].fsr, 0.75);
    }

    #[test]
    fn kendall_tau_reference_values() {
        // Perfectly concordant / discordant.
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.3, 0.2, 0.1]), -1.0);
        // All-tied ys: denominator collapses to 0.
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), 0.0);
        // Hand value: one discordant pair among three.
        let tau = kendall_tau(&[1.0, 2.0, 3.0], &[0.1, 0.3, 0.2]);
        assert!((tau - (1.0 / 3.0)).abs() < 1e-12, "{tau}");
        // Monotone non-decreasing with ties stays non-negative.
        let tau = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 1.0]);
        assert!(tau > 0.0);
    }
}
