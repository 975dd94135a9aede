//! Read-only summary of a finished run directory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::records::{read_csv, MetricsRow, METRICS_CSV, SUMMARY_JSON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityGroup {
    pub sparsity: f64,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub row_count: usize,
    pub groups: Vec<SparsityGroup>,
}

impl Summary {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let row_count = rows.len();
        let mut groups: Vec<SparsityGroup> = Vec::new();
        for r in rows {
            match groups.iter_mut().find(|g| g.sparsity == r.sparsity) {
                Some(g) => g.rows.push(r),
                None => groups.push(SparsityGroup {
                    sparsity: r.sparsity,
                    rows: vec![r],
                }),
            }
        }
        groups.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity));
        Self { row_count, groups }
    }

    pub fn render(&self) -> String {
        if self.row_count == 0 {
            return "no rows\n".into();
        }
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(s, "sparsity {}", g.sparsity);
            let _ = writeln!(
                s,
                "  {:<10} {:<15} {:<6} {:>9} {:>7} {:>12}",
                "method", "update_mode", "reflow", "accuracy", "modal", "final_ratio"
            );
            for r in &g.rows {
                let _ = writeln!(
                    s,
                    "  {:<10} {:<15} {:<6} {:>9.2} {:>7.3} {:>12.4}",
                    r.method, r.update_mode, r.reflow, r.accuracy_pct, r.modal_fraction, r.final_variance_ratio
                );
            }
        }
        s
    }
}

/// Loads `metrics.csv` from `run_dir`, writes `summary.json` next to it and
/// returns the summary.
pub fn report(run_dir: &Path) -> Result<Summary, CliError> {
    let path = run_dir.join(METRICS_CSV);
    if !path.is_file() {
        return Err(CliError::Report(format!("{} not found", path.display())));
    }
    let rows: Vec<MetricsRow> =
        read_csv(&path).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
    let summary = Summary::from_rows(rows);
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    std::fs::write(run_dir.join(SUMMARY_JSON), json)
        .map_err(|e| CliError::Report(format!("writing {SUMMARY_JSON}: {e}")))?;
    Ok(summary)
}
