//! JSON and CSV output for evaluation results.
//!
//! JSON document fields: `config`, `metrics` (a [`MetricsReport`]) and,
//! when a sweep ran, `sweep` (a [`SweepResult`]).
//!
//! Per-class CSV columns:
//! `category,ap,f1,precision,recall,tp,fp,fn,ignored,n_gt`.
//!
//! Sweep CSV columns:
//! `threshold,map_nc_mean,map_nc_std,map_nc_lower,map_nc_upper,mf1,n_predictions`,
//! where lower/upper are mean ∓ std.

use serde::{Deserialize, Serialize};

use crate::metrics::{EvalConfig, MetricsReport, SweepResult};

pub const CLASS_CSV_HEADER: [&str; 10] = [
    "category",
    "ap",
    "f1",
    "precision",
    "recall",
    "tp",
    "fp",
    "fn",
    "ignored",
    "n_gt",
];

pub const SWEEP_CSV_HEADER: [&str; 7] = [
    "threshold",
    "map_nc_mean",
    "map_nc_std",
    "map_nc_lower",
    "map_nc_upper",
    "mf1",
    "n_predictions",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub config: EvalConfig,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
}

impl EvalDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

pub fn class_csv(report: &MetricsReport) -> String {
    let mut names: Vec<&String> = report.per_class_ap.keys().chain(report.counts.keys()).collect();
    names.sort();
    names.dedup();
    let rows = names
        .into_iter()
        .map(|name| {
            let c = report.counts.get(name).copied().unwrap_or_default();
            let precision = if c.tp + c.fp == 0 {
                0.0
            } else {
                c.tp as f64 / (c.tp + c.fp) as f64
            };
            let recall = if c.n_gt == 0 { 0.0 } else { c.tp as f64 / c.n_gt as f64 };
            let opt = |v: Option<&f64>| v.map(|v| v.to_string()).unwrap_or_default();
            vec![
                name.clone(),
                opt(report.per_class_ap.get(name)),
                opt(report.per_class_f1.get(name)),
                precision.to_string(),
                recall.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.ignored.to_string(),
                c.n_gt.to_string(),
            ]
        })
        .collect();
    to_csv(&CLASS_CSV_HEADER, rows)
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let rows = sweep
        .points
        .iter()
        .map(|p| {
            vec![
                p.threshold.to_string(),
                p.map_nc_mean.to_string(),
                p.map_nc_std.to_string(),
                (p.map_nc_mean - p.map_nc_std).to_string(),
                (p.map_nc_mean + p.map_nc_std).to_string(),
                p.mf1.to_string(),
                p.n_predictions.to_string(),
            ]
        })
        .collect();
    to_csv(&SWEEP_CSV_HEADER, rows)
}
