//! Classification metrics and feature-correlation reporting.
//!
//! Conventions for degenerate cases are fixed here once and shared by the
//! evaluation reports and the ablation harness: undefined precision,
//! recall, or F1 terms (0/0) evaluate to 0, and Cohen's kappa is 0 when
//! expected agreement is 1.

use crate::schema::{EventFeatureRow, SeverityLabel, N_CLASSES};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {truth} true labels vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("feature index {0} out of range for {1} features")]
    FeatureOutOfRange(usize, usize),
}

/// Row index = true class, column index = predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(
        y_true: &[SeverityLabel],
        y_pred: &[SeverityLabel],
    ) -> Result<ConfusionMatrix, MetricsError> {
        if y_true.len() != y_pred.len() {
            return Err(MetricsError::LengthMismatch {
                truth: y_true.len(),
                pred: y_pred.len(),
            });
        }
        if y_true.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            counts[t.as_index()][p.as_index()] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..N_CLASSES).map(|r| self.counts[r][c]).sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub n: u64,
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    pub per_class_precision: [f64; N_CLASSES],
    pub per_class_recall: [f64; N_CLASSES],
    pub per_class_f1: [f64; N_CLASSES],
    pub confusion: ConfusionMatrix,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Computes accuracy, Cohen's kappa, macro-F1, and per-class
/// precision/recall/F1 from aligned label vectors.
pub fn evaluate(
    y_true: &[SeverityLabel],
    y_pred: &[SeverityLabel],
) -> Result<Evaluation, MetricsError> {
    let confusion = ConfusionMatrix::from_pairs(y_true, y_pred)?;
    let n = confusion.total() as f64;

    let trace: u64 = (0..N_CLASSES).map(|c| confusion.counts[c][c]).sum();
    let accuracy = trace as f64 / n;

    let p_o = accuracy;
    let p_e: f64 = (0..N_CLASSES)
        .map(|c| (confusion.row_sum(c) as f64 / n) * (confusion.col_sum(c) as f64 / n))
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        0.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    let mut per_class_precision = [0.0; N_CLASSES];
    let mut per_class_recall = [0.0; N_CLASSES];
    let mut per_class_f1 = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        let tp = confusion.counts[c][c] as f64;
        let p = ratio(tp, confusion.col_sum(c) as f64);
        let r = ratio(tp, confusion.row_sum(c) as f64);
        per_class_precision[c] = p;
        per_class_recall[c] = r;
        per_class_f1[c] = ratio(2.0 * p * r, p + r);
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / N_CLASSES as f64;

    Ok(Evaluation {
        n: confusion.total(),
        accuracy,
        kappa,
        macro_f1,
        per_class_precision,
        per_class_recall,
        per_class_f1,
        confusion,
    })
}

/// Pearson correlation matrix over the given feature indices.
///
/// Each pair is computed over the rows where both features are
/// non-missing; pairs with fewer than two such rows or with zero variance
/// get correlation 0. Diagonal entries are 1 by definition.
pub fn correlation_matrix(
    rows: &[EventFeatureRow],
    features: &[usize],
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let width = rows[0].values.len();
    for &f in features {
        if f >= width {
            return Err(MetricsError::FeatureOutOfRange(f, width));
        }
    }
    let k = features.len();
    let mut out = vec![vec![0.0; k]; k];
    for a in 0..k {
        out[a][a] = 1.0;
        for b in (a + 1)..k {
            let (fa, fb) = (features[a], features[b]);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for row in rows {
                if let (Some(x), Some(y)) = (row.value(fa), row.value(fb)) {
                    xs.push(x);
                    ys.push(y);
                }
            }
            let r = pearson(&xs, &ys);
            out[a][b] = r;
            out[b][a] = r;
        }
    }
    Ok(out)
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
