use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Result for one image, query or pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownEntry {
    pub key: String,
    pub value: f64,
    pub matched: usize,
    pub gt: usize,
    pub predictions: usize,
}

impl BreakdownEntry {
    /// Entry whose value is `matched / gt` (0 without GT).
    pub fn new(key: String, matched: usize, gt: usize, predictions: usize) -> Self {
        let value = if gt == 0 { 0.0 } else { matched as f64 / gt as f64 };
        Self {
            key,
            value,
            matched,
            gt,
            predictions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub matched: usize,
    pub gt: usize,
    pub predictions: usize,
    pub breakdown: Vec<BreakdownEntry>,
    /// Keys left out of the aggregate (queries without positives).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

impl EvalReport {
    /// Pooled ratio `sum matched / sum gt` over the breakdown.
    pub fn aggregate(metric: String, breakdown: Vec<BreakdownEntry>) -> Self {
        let matched = breakdown.iter().map(|e| e.matched).sum();
        let gt = breakdown.iter().map(|e| e.gt).sum();
        let predictions = breakdown.iter().map(|e| e.predictions).sum();
        let value = if gt == 0 { 0.0 } else { matched as f64 / gt as f64 };
        Self {
            metric,
            value,
            matched,
            gt,
            predictions,
            breakdown,
            excluded: Vec::new(),
        }
    }
}

/// Plain-text table with one row per report, values in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let headers = ["metric", "value (%)", "matched", "gt", "predictions"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.metric.clone(),
                format!("{:.2}", 100.0 * r.value),
                r.matched.to_string(),
                r.gt.to_string(),
                r.predictions.to_string(),
            ]
        })
        .collect();
    let mut widths = headers.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 5]| {
        let _ = write!(out, "{:<w$}", cells[0], w = widths[0]);
        for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    };
    line(&mut out, headers);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, [&rule[0], &rule[1], &rule[2], &rule[3], &rule[4]]);
    for row in &rows {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_aligned() {
        let r = EvalReport::aggregate(
            "relationship-recall@50".into(),
            vec![BreakdownEntry::new("a".into(), 1, 3, 10)],
        );
        let text = render_table(&[r]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[2].contains("33.33"));
    }
}
