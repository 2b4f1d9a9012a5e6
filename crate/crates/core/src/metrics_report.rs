//! Confusion matrices, per-class recall/F1, macro-F1 and the per-class
//! report tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::taxonomy::{CompoundExpression, NUM_COMPOUND};

/// Rendered for a cell with no defined value.
pub const NOT_APPLICABLE: &str = "-";

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        Ok(Self {
            n,
            counts: counts.into_iter().flatten().collect(),
        })
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], n: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::LengthMismatch {
                left: truth.len(),
                right: pred.len(),
            });
        }
        let mut cm = Self::zeros(n);
        for (&t, &p) in truth.iter().zip(pred) {
            for label in [t, p] {
                if label >= n {
                    return Err(Error::LabelOutOfRange { label, classes: n });
                }
            }
            cm.counts[t * n + p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.n..(c + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }
}

/// Confusion matrix over the seven compound classes.
pub fn confusion(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_labels(truth, pred, NUM_COMPOUND)
}

/// Recall per class in percent; `None` for classes with no samples.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.n_classes())
        .map(|c| {
            let row = cm.row_sum(c);
            (row > 0).then(|| 100.0 * cm.get(c, c) as f64 / row as f64)
        })
        .collect()
}

/// F1 per class; 0 whenever precision or recall is undefined or both are 0.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.n_classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let (row, col) = (cm.row_sum(c), cm.col_sum(c));
            if row == 0 || col == 0 {
                return 0.0;
            }
            let precision = tp / col as f64;
            let recall = tp / row as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect()
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    macro_average(&per_class_f1(cm))
}

/// Unweighted mean of per-class scores; 0 for an empty slice.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// `trace / total` in percent; `None` when empty.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Option<f64> {
    let total = cm.total();
    (total > 0).then(|| 100.0 * cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percent recall per class in compound class order.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_f1: Vec<f64>,
    /// Percent.
    pub overall_accuracy: Option<f64>,
    /// In `[0, 1]`.
    pub macro_f1: f64,
    pub samples: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_class_f1 = per_class_f1(cm);
        Self {
            per_class_accuracy: per_class_accuracy(cm),
            macro_f1: macro_average(&per_class_f1),
            per_class_f1,
            overall_accuracy: overall_accuracy(cm),
            samples: cm.total(),
        }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(&confusion(truth, pred)?))
    }

    fn has_samples(&self) -> bool {
        self.samples > 0
    }
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| NOT_APPLICABLE.to_string(), |v| format!("{v:.2}"))
}

const NAME_HEADER: &str = "Compound Expression";

/// Fixed-width table: one row per compound class, then `acc` and `F1`, one
/// column per model. Values are percentages with two decimals.
pub fn render_report(reports: &[EvalReport], model_names: &[&str]) -> Result<String> {
    if reports.len() != model_names.len() {
        return Err(Error::LengthMismatch {
            left: reports.len(),
            right: model_names.len(),
        });
    }
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for c in CompoundExpression::ALL {
        let cells = reports
            .iter()
            .map(|r| cell(r.per_class_accuracy.get(c.id()).copied().flatten()))
            .collect();
        rows.push((c.name().to_string(), cells));
    }
    rows.push((
        "acc".into(),
        reports.iter().map(|r| cell(r.overall_accuracy)).collect(),
    ));
    rows.push((
        "F1".into(),
        reports
            .iter()
            .map(|r| cell(r.has_samples().then_some(100.0 * r.macro_f1)))
            .collect(),
    ));

    let name_width = CompoundExpression::ALL
        .iter()
        .map(|c| c.name().len())
        .chain([NAME_HEADER.len()])
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = model_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            rows.iter()
                .map(|(_, cells)| cells[j].chars().count())
                .chain([name.chars().count(), 6])
                .max()
                .unwrap_or(6)
        })
        .collect();

    let mut out = String::new();
    let mut line = |label: &str, cells: &[String]| {
        let mut s = format!("{label:<name_width$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, "  {c:>w$}");
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    let header: Vec<String> = model_names.iter().map(|s| s.to_string()).collect();
    line(NAME_HEADER, &header);
    for (label, cells) in &rows {
        line(label, cells);
    }
    Ok(out)
}

/// Machine-readable single-model report with header `class\taccuracy\tf1`.
/// Accuracy is in percent, F1 in `[0, 1]`; the last row holds overall
/// accuracy and macro-F1.
pub fn render_tsv(report: &EvalReport) -> String {
    let na = |v: Option<f64>, digits: usize| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.digits$}"));
    let mut out = String::from("class\taccuracy\tf1\n");
    for c in CompoundExpression::ALL {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            c.name(),
            na(report.per_class_accuracy.get(c.id()).copied().flatten(), 2),
            na(report.per_class_f1.get(c.id()).copied(), 6),
        );
    }
    let _ = writeln!(
        out,
        "overall\t{}\t{}",
        na(report.overall_accuracy, 2),
        na(report.has_samples().then_some(report.macro_f1), 6)
    );
    out
}
