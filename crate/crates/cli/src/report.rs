//! Report rendering: TPR-vs-step table, per-step summary tables with the
//! four fixed FPR columns, and the model-quality line.
//!
//! Formatting is fixed-precision throughout so identical inputs render
//! byte-identical reports. TPR@FPR entries below the empirical resolution
//! floor are marked with `*` and explained in a footnote instead of being
//! printed as bare numbers.

use std::fmt::Write as _;

use diffaudit_core::metrics::{RocReport, TPR_FPR_LEVELS};

pub const LEVEL_LABELS: [&str; 4] = ["TPR@10%FPR", "TPR@1%FPR", "TPR@0.1%FPR", "TPR@0.01%FPR"];

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// One row of the per-step summary: the four TPR levels plus accuracy,
/// below-floor entries starred.
pub fn summary_row(label: &str, report: &RocReport<f64>) -> String {
    let mut row = format!("{label:>12}");
    for entry in &report.tpr_at_fpr {
        let mark = if entry.below_floor { "*" } else { "" };
        let _ = write!(row, " {:>13}", format!("{}{mark}", pct(entry.tpr)));
    }
    let _ = write!(row, " {:>9}", pct(report.best_accuracy));
    let _ = write!(row, " {:>7.4}", report.auc);
    row
}

pub fn summary_header() -> String {
    let mut h = format!("{:>12}", "step");
    for label in LEVEL_LABELS {
        let _ = write!(h, " {label:>13}");
    }
    let _ = write!(h, " {:>9}", "accuracy");
    let _ = write!(h, " {:>7}", "auc");
    h
}

/// Footnote explaining starred entries.
pub fn floor_footnote(n_nonmembers: usize) -> String {
    format!(
        "* below the empirical FPR resolution floor 1/{n_nonmembers}; \
         value is the TPR at zero false positives (no extrapolation)"
    )
}

/// Fig-1-style table: one row per step with the fixed TPR levels.
pub fn tpr_vs_step_csv(rows: &[(f64, RocReport<f64>)], fingerprint: &str) -> String {
    let mut out = format!(
        "#diffaudit-csv v1 kind=tpr_vs_step fingerprint={fingerprint}\n\
         step,auc,accuracy,tpr_at_10pct,tpr_at_1pct,tpr_at_0p1pct,tpr_at_0p01pct\n"
    );
    for (step, report) in rows {
        let _ = write!(out, "{step},{:.6},{:.6}", report.auc, report.best_accuracy);
        for entry in &report.tpr_at_fpr {
            let _ = write!(out, ",{:.6}", entry.tpr);
        }
        out.push('\n');
    }
    out
}

/// Steps highlighted in the summary table: endpoints, the strongest step,
/// and evenly spaced interior steps (deduplicated, in order).
pub fn select_summary_steps(rows: &[(f64, RocReport<f64>)]) -> Vec<usize> {
    if rows.is_empty() {
        return Vec::new();
    }
    let best = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.auc.partial_cmp(&b.1 .1.auc).expect("finite auc"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let n = rows.len();
    let mut picks = vec![0, best, n / 4, n / 2, 3 * n / 4, n - 1];
    picks.sort_unstable();
    picks.dedup();
    picks
}

/// Sanity check for level ordering between the report struct and the
/// rendered columns.
pub fn levels_match() -> bool {
    TPR_FPR_LEVELS == [0.1, 0.01, 0.001, 0.0001]
}
