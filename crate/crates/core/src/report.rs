//! Rendering estimates as JSON or as a fixed-width comparison table.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::estimators::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReportStyle {
    Json,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: Option<u64>, config_hash: String) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash,
        }
    }
}

/// `value ×100` with two decimals.
pub fn format_scaled_estimate(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}

/// `se ×100` with four decimals, trailing zeros dropped.
pub fn format_scaled_se(se: f64) -> String {
    let s = format!("{:.4}", se * 100.0);
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').map_or_else(|| s.to_string(), |t| format!("{t}.0"))
}

/// `34.06 (0.067)`.
pub fn format_cell(value: f64, se: f64) -> String {
    format!("{} ({})", format_scaled_estimate(value), format_scaled_se(se))
}

/// One row per parameter component, one column per estimator, entries ×100.
pub fn format_table(estimates: &[Estimate], row_labels: Option<&[String]>) -> Result<String> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Config("nothing to report".into()))?;
    let k = first.beta.len();
    if estimates.iter().any(|e| e.beta.len() != k) {
        return Err(Error::ShapeMismatch("estimates have different dimensions".into()));
    }
    let labels: Vec<String> = match row_labels {
        Some(l) if l.len() == k => l.to_vec(),
        Some(_) => return Err(Error::ShapeMismatch("one row label per parameter".into())),
        None => (0..k).map(|i| format!("beta[{i}]")).collect(),
    };
    let cells: Vec<Vec<String>> = (0..k)
        .map(|r| estimates.iter().map(|e| format_cell(e.beta[r], e.se[r])).collect())
        .collect();
    let label_w = labels.iter().map(String::len).max().unwrap_or(0).max(1);
    let widths: Vec<usize> = estimates
        .iter()
        .enumerate()
        .map(|(c, e)| {
            cells
                .iter()
                .map(|row| row[c].chars().count())
                .chain([e.label.chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = format!("{:<label_w$}", "");
    for (e, w) in estimates.iter().zip(&widths) {
        out.push_str(&format!("  {:>w$}", e.label, w = w));
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(&cells) {
        out.push_str(&format!("{label:<label_w$}"));
        for (cell, w) in row.iter().zip(&widths) {
            out.push_str(&format!("  {:>w$}", cell, w = w));
        }
        out.push('\n');
    }
    Ok(out)
}

/// JSON value for a run: a single estimate is emitted as one object,
/// several as `{"estimates": [...]}`; either way with a provenance block.
pub fn estimates_json(estimates: &[Estimate], provenance: &Provenance) -> Value {
    let prov = serde_json::to_value(provenance).expect("provenance serializes");
    if let [single] = estimates {
        let mut v = serde_json::to_value(single).expect("estimate serializes");
        v.as_object_mut().expect("object").insert("provenance".into(), prov);
        v
    } else {
        json!({ "estimates": estimates, "provenance": prov })
    }
}

pub fn format_report(
    estimates: &[Estimate],
    style: ReportStyle,
    provenance: &Provenance,
    row_labels: Option<&[String]>,
) -> Result<String> {
    if estimates.is_empty() {
        return Err(Error::Config("nothing to report".into()));
    }
    match style {
        ReportStyle::Json => {
            let mut s = serde_json::to_string_pretty(&estimates_json(estimates, provenance)).expect("json");
            s.push('\n');
            Ok(s)
        }
        ReportStyle::Table => format_table(estimates, row_labels),
    }
}
