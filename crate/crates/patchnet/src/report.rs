//! Text reports.
//!
//! Both reports are `key = value` header lines followed by a `[section]`
//! line and tab-separated rows whose first row names the columns. Numbers
//! are printed with full precision; absent values are written as `none`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use patchnet_core::metrics::MaskOverlapReport;
use patchnet_core::optim::{StopReason, TrainReport};

pub fn stop_reason_name(r: StopReason) -> &'static str {
    match r {
        StopReason::Patience => "patience",
        StopReason::TrainAccuracy100 => "train_acc_100",
        StopReason::MaxEpochs => "max_epochs",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

pub fn train_report_text(report: &TrainReport, best_checkpoint: &str) -> String {
    let mut out = String::from("# patchnet training report v1\n");
    let _ = writeln!(out, "stop_reason = {}", stop_reason_name(report.stop_reason));
    let _ = writeln!(out, "epochs = {}", report.epochs.len());
    let _ = writeln!(out, "optimizer_steps = {}", report.optimizer_steps);
    let _ = writeln!(out, "best_epoch = {}", report.best_epoch);
    let _ = writeln!(out, "best_val_loss = {}", report.best_val_loss);
    let _ = writeln!(out, "best_checkpoint = {best_checkpoint}");
    out.push_str("[epochs]\nepoch\ttrain_loss\ttrain_accuracy\tval_loss\tval_accuracy\timproved\n");
    for e in &report.epochs {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.improved
        );
    }
    out
}

/// `extra_header` holds further `key = value` lines, e.g. the
/// preprocessing used.
pub fn overlap_report_text(report: &MaskOverlapReport, extra_header: &str) -> String {
    let mut out = String::from("# patchnet mask overlap report v1\n");
    let _ = writeln!(out, "threshold = {}", report.threshold);
    let _ = writeln!(out, "images = {}", report.images.len());
    let _ = writeln!(out, "average_exact_match = {}", report.average_exact_match);
    let _ = writeln!(out, "average_recall = {}", opt(report.average_recall));
    let _ = writeln!(out, "average_auroc = {}", opt(report.average_auroc));
    let _ = writeln!(out, "recall_excluded = {}", report.recall_excluded);
    let _ = writeln!(out, "auroc_excluded = {}", report.auroc_excluded);
    out.push_str(extra_header);
    out.push_str("[images]\nid\texact_match\trecall\tauroc\n");
    for r in &report.images {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, r.exact_match, opt(r.recall), opt(r.auroc));
    }
    out
}

/// Header and rows of a report produced above.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedReport {
    pub header: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedReport {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    /// Values of one column, in row order.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

pub fn parse_report(text: &str) -> ParsedReport {
    let mut out = ParsedReport::default();
    let mut in_rows = false;
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if line.starts_with('[') {
            in_rows = true;
            continue;
        }
        if in_rows {
            let cells: Vec<String> = line.split('\t').map(String::from).collect();
            if out.columns.is_empty() {
                out.columns = cells;
            } else {
                out.rows.push(cells);
            }
        } else if let Some((k, v)) = line.split_once('=') {
            out.header.insert(k.trim().into(), v.trim().into());
        }
    }
    out
}
