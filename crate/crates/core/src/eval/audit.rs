//! Consistency audit of published (precision, recall, F1) rows.
//!
//! Accuracy cannot be recomputed from precision and recall alone (it needs
//! the class balance), so only F1 is checked.

use std::io::Read;

use serde::{Deserialize, Serialize};

use super::metrics::f1_from;

/// Largest accepted gap between published and recomputed F1: the
/// envelope of three-decimal rounding.
pub const F1_TOLERANCE: f64 = 0.0015;

/// Published tables bundled with the crate.
pub const BUNDLED_TABLES: &str = include_str!("../../fixtures/published_tables.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedRow {
    pub table: String,
    pub model: String,
    pub dataset: String,
    #[serde(default)]
    pub accuracy: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditedRow {
    #[serde(flatten)]
    pub row: PublishedRow,
    pub recomputed_f1: Option<f64>,
    pub deviation: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub rows: Vec<AuditedRow>,
}

impl AuditReport {
    pub fn failures(&self) -> impl Iterator<Item = &AuditedRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn all_pass(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Plain-text table, one line per row.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<5} {:<30} {:<13} {:>6} {:>6} {:>6} {:>9} {:>9}  status\n",
            "table", "model", "dataset", "P", "R", "F1", "F1(calc)", "|dev|"
        );
        for r in &self.rows {
            let calc = r.recomputed_f1.map_or("undef".into(), |v| format!("{v:.4}"));
            let dev = r.deviation.map_or("-".into(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "{:<5} {:<30} {:<13} {:>6.3} {:>6.3} {:>6.3} {:>9} {:>9}  {}\n",
                r.row.table,
                r.row.model,
                r.row.dataset,
                r.row.precision,
                r.row.recall,
                r.row.f1,
                calc,
                dev,
                if r.pass { "ok" } else { "MISMATCH" }
            ));
        }
        let failed = self.failures().count();
        out.push_str(&format!(
            "{} rows, {} within ±{}, {} mismatched\n",
            self.rows.len(),
            self.rows.len() - failed,
            self.tolerance,
            failed
        ));
        out
    }
}

pub fn read_rows(reader: impl Read) -> Result<Vec<PublishedRow>, csv::Error> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader)
        .deserialize()
        .collect()
}

pub fn audit_row(row: &PublishedRow, tolerance: f64) -> AuditedRow {
    let recomputed = f1_from(row.precision, row.recall);
    let deviation = recomputed.map(|f| (f - row.f1).abs());
    AuditedRow {
        row: row.clone(),
        recomputed_f1: recomputed,
        // zero precision and recall: only a published F1 of 0 is consistent
        pass: deviation.map_or(row.f1.abs() <= tolerance, |d| d <= tolerance),
        deviation,
    }
}

/// Recomputes F1 for every row and flags deviations beyond `tolerance`.
pub fn consistency_audit(rows: &[PublishedRow], tolerance: f64) -> AuditReport {
    AuditReport {
        tolerance,
        rows: rows.iter().map(|r| audit_row(r, tolerance)).collect(),
    }
}
