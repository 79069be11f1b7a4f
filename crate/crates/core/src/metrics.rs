//! Confusion matrices, accuracy and support-weighted precision / recall / F1,
//! and the report formats built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{names} class names for {classes} classes")]
    NameCount { names: usize, classes: usize },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(
        truth: &[usize],
        pred: &[usize],
        classes: usize,
    ) -> Result<Self, MetricsError> {
        check_labels(truth, pred, classes)?;
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        assert!(rows.iter().all(|r| r.len() == classes), "square matrix");
        Self {
            classes,
            counts: rows.concat(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes)
            .map(<[u64]>::to_vec)
            .collect()
    }

    /// CSV with a header of predicted class names and one row per true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, name) in names.iter().enumerate() {
            out.push_str(name);
            for p in 0..self.classes {
                write!(out, ",{}", self.get(t, p)).expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

fn check_labels(truth: &[usize], pred: &[usize], classes: usize) -> Result<(), MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    if let Some(&label) = truth.iter().chain(pred).find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Shared tail of both code paths: per-class counts to summary.
fn summarize(tp: &[u64], predicted: &[u64], support: &[u64], names: &[String]) -> MetricSummary {
    let total: u64 = support.iter().sum();
    let correct: u64 = tp.iter().sum();
    let per_class: Vec<ClassMetrics> = (0..tp.len())
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            ClassMetrics {
                id: c,
                name: names[c].clone(),
                precision,
                recall,
                f1: f1(precision, recall),
                support: support[c],
            }
        })
        .collect();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        let s: f64 = per_class.iter().map(|m| m.support as f64 * f(m)).sum();
        if total == 0 {
            0.0
        } else {
            s / total as f64
        }
    };
    MetricSummary {
        accuracy: ratio(correct, total),
        precision_w: weighted(|m| m.precision),
        // support_c * (tp_c / support_c) summed over classes is the number of
        // correct predictions; using it directly avoids rounding drift.
        recall_w: ratio(correct, total),
        f1_w: weighted(|m| m.f1),
        per_class,
    }
}

fn check_names(names: &[String], classes: usize) -> Result<(), MetricsError> {
    if names.len() != classes {
        return Err(MetricsError::NameCount {
            names: names.len(),
            classes,
        });
    }
    Ok(())
}

pub fn metrics_from_confusion(
    cm: &ConfusionMatrix,
    names: &[String],
) -> Result<MetricSummary, MetricsError> {
    let c = cm.classes();
    check_names(names, c)?;
    let tp: Vec<u64> = (0..c).map(|i| cm.get(i, i)).collect();
    let predicted: Vec<u64> = (0..c).map(|i| cm.predicted(i)).collect();
    let support: Vec<u64> = (0..c).map(|i| cm.support(i)).collect();
    Ok(summarize(&tp, &predicted, &support, names))
}

/// Metrics counted straight from the label vectors.
pub fn compute_metrics(
    truth: &[usize],
    pred: &[usize],
    names: &[String],
) -> Result<MetricSummary, MetricsError> {
    let c = names.len();
    check_labels(truth, pred, c)?;
    let mut tp = vec![0u64; c];
    let mut predicted = vec![0u64; c];
    let mut support = vec![0u64; c];
    for (&t, &p) in truth.iter().zip(pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    Ok(summarize(&tp, &predicted, &support, names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub kind: String,
    pub accuracy: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    /// Wall seconds per stage; left out of serialized output when empty.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn evaluate(
        task: &str,
        kind: &str,
        truth: &[usize],
        pred: &[usize],
        names: &[String],
    ) -> Result<Self, MetricsError> {
        let cm = ConfusionMatrix::from_labels(truth, pred, names.len())?;
        let summary = metrics_from_confusion(&cm, names)?;
        Ok(Self {
            task: task.to_string(),
            kind: kind.to_string(),
            accuracy: summary.accuracy,
            precision_w: summary.precision_w,
            recall_w: summary.recall_w,
            f1_w: summary.f1_w,
            per_class: summary.per_class,
            confusion: cm.rows(),
            timings: BTreeMap::new(),
        })
    }

    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&self.confusion)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.per_class.iter().map(|m| m.name.clone()).collect()
    }

    /// Copy without timings, for byte-stable output.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Aligned text table, one row per report, rates in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["kind", "task", "accuracy", "precision", "recall", "f1"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.kind.clone(),
                r.task.clone(),
                pct(r.accuracy),
                pct(r.precision_w),
                pct(r.recall_w),
                pct(r.f1_w),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 2 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&header);
    for row in &rows {
        line(&row.each_ref().map(String::as_str));
    }
    out
}

/// Per-class table of one report.
pub fn render_class_table(report: &EvalReport) -> String {
    let mut out = format!(
        "{:<16} {:>9} {:>9} {:>9} {:>9}\n",
        "class", "precision", "recall", "f1", "support"
    );
    for m in &report.per_class {
        writeln!(
            out,
            "{:<16} {:>9} {:>9} {:>9} {:>9}",
            m.name,
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            m.support
        )
        .expect("string write");
    }
    out
}

pub fn render_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}
