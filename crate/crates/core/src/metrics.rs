//! Confusion matrices and support-weighted F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    /// `sum_c support_c * F1_c / sum_c support_c`; 0 for an empty set.
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub n_samples: usize,
}

/// Scores `predictions` against `labels` over classes `0..label_names.len()`.
///
/// Precision, recall and F1 of a class with an empty denominator are 0.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], label_names: &[String]) -> Result<EvaluationReport> {
    let c = label_names.len();
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if c == 0 {
        return Err(Error::Contract("no classes".into()));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        if p >= c || y >= c {
            return Err(Error::Data(format!(
                "sample {i}: prediction {p} / label {y} outside 0..{c}"
            )));
        }
        confusion[y][p] += 1;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let support: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label: label_names[k].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let n = labels.len();
    let weighted_f1 = if n == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.support as f64 * m.f1).sum::<f64>() / n as f64
    };
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    Ok(EvaluationReport {
        confusion,
        per_class,
        weighted_f1,
        accuracy: ratio(correct, n),
        n_samples: n,
    })
}

/// Aligned text table: one row per report, class F1 columns, then the weighted average.
///
/// All reports must share the same class list. Values are percentages.
pub fn format_table(rows: &[(String, &EvaluationReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut headers: Vec<String> = vec!["model".into()];
    headers.extend(first.per_class.iter().map(|m| m.label.clone()));
    headers.push("w-average F1".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut cells = vec![name.clone()];
            cells.extend(r.per_class.iter().map(|m| format!("{:.2}", 100.0 * m.f1)));
            cells.push(format!("{:.2}", 100.0 * r.weighted_f1));
            cells
        })
        .collect();
    render(&headers, &body)
}

/// Left-aligns the first column and right-aligns the rest.
pub fn render(headers: &[String], body: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..headers.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].chars().count())
                .chain([headers[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
    };
    line(headers);
    line(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
    for row in body {
        line(row);
    }
    out
}
