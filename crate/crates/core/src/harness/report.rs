use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, balanced_accuracy, iou, recall, Class, ConfusionMatrix};
use crate::seg::Monitor;

/// Metrics of one model on one split, from a single accumulated confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: BTreeMap<String, f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["balanced_accuracy", "iou_neg", "iou_pos", "recall_neg", "recall_pos"];

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let values = [
            balanced_accuracy(&cm)?,
            iou(&cm, Class::Negative)?,
            iou(&cm, Class::Positive)?,
            recall(&cm, Class::Negative)?,
            recall(&cm, Class::Positive)?,
        ];
        Ok(EvalReport {
            confusion: cm,
            metrics: METRIC_NAMES.iter().map(|s| s.to_string()).zip(values).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn monitor_value(cm: &ConfusionMatrix, monitor: Monitor) -> Result<f64> {
    match monitor {
        Monitor::BalancedAccuracy => balanced_accuracy(cm),
        Monitor::PositiveIou => iou(cm, Class::Positive),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub runs: usize,
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.3} ± {:.3}", self.mean, s),
            None => write!(f, "{:.3}", self.mean),
        }
    }
}

/// Mean and sample standard deviation of each metric across runs.
pub fn aggregate_runs(reports: &[BTreeMap<String, f64>]) -> Result<Vec<MetricSummary>> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to aggregate"))?;
    if reports.iter().any(|r| r.keys().ne(first.keys())) {
        return Err(Error::invalid("reports carry different metric sets"));
    }
    Ok(first
        .keys()
        .map(|k| {
            let vals: Vec<f64> = reports.iter().map(|r| r[k]).collect();
            MetricSummary {
                metric: k.clone(),
                mean: metrics::mean(&vals).expect("non-empty"),
                std: metrics::sample_std(&vals),
                runs: vals.len(),
            }
        })
        .collect())
}

/// Aligned plain-text table: one row per label, one column per metric.
pub fn render_table(rows: &[(String, Vec<MetricSummary>)]) -> String {
    let Some((_, first)) = rows.first() else { return String::new() };
    let headers: Vec<&str> = first.iter().map(|m| m.metric.as_str()).collect();
    let cells: Vec<Vec<String>> = rows.iter().map(|(_, ms)| ms.iter().map(ToString::to_string).collect()).collect();
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(5);
    let col_w: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(j, h)| cells.iter().map(|r| r[j].chars().count()).max().unwrap_or(0).max(h.len()))
        .collect();
    let mut out = format!("{:<label_w$}", "model");
    for (h, w) in headers.iter().zip(&col_w) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    for ((label, _), row) in rows.iter().zip(&cells) {
        out.push_str(&format!("{label:<label_w$}"));
        for (c, w) in row.iter().zip(&col_w) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
    }
    out
}
