//! Multinomial logistic regression over standardized features, fit by
//! damped Newton iteration to gradient norm ≤ 1e-6 (or 500 iterations).

use super::{softmax, DataMatrix, ModelError};
use crate::schema::{EventFeatureRow, FeatureSchema, SeverityLabel, N_CLASSES};
use nalgebra::{DMatrix, DVector};

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 500;
/// Tiny ridge on the bias diagonal: softmax margins are invariant to a
/// common shift, so the bias block of the Hessian is singular without it.
const BIAS_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// Row-major 3 × d weight matrix over standardized features.
    pub weights: Vec<f64>,
    pub bias: [f64; N_CLASSES],
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub l2: f64,
    pub n_features: usize,
    pub schema_hash: u64,
    pub converged: bool,
    pub grad_norm: f64,
}

impl LinearModel {
    fn scores(&self, values: &[f64], missing: &[bool]) -> [f64; N_CLASSES] {
        let d = self.n_features;
        let mut s = self.bias;
        for j in 0..d {
            let v = values[j];
            if missing[j] || !v.is_finite() {
                continue; // standardized missing value imputed at the mean
            }
            let z = (v - self.means[j]) / self.scales[j];
            for c in 0..N_CLASSES {
                s[c] += self.weights[c * d + j] * z;
            }
        }
        s
    }

    pub fn predict_row(&self, values: &[f64], missing: &[bool]) -> [f64; N_CLASSES] {
        softmax(&self.scores(values, missing))
    }
}

/// Means and scales over present values; zero-variance (or all-missing)
/// features get scale 1 so standardization is always defined.
fn standardization(data: &DataMatrix) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; data.n_features];
    let mut scales = vec![1.0; data.n_features];
    for j in 0..data.n_features {
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..data.n_rows {
            if let Some(v) = data.get(i, j) {
                sum += v;
                count += 1.0;
            }
        }
        if count == 0.0 {
            continue;
        }
        let mean = sum / count;
        let mut var = 0.0;
        for i in 0..data.n_rows {
            if let Some(v) = data.get(i, j) {
                var += (v - mean) * (v - mean);
            }
        }
        var /= count;
        means[j] = mean;
        if var.sqrt() > 1e-12 {
            scales[j] = var.sqrt();
        }
    }
    (means, scales)
}

pub fn fit_logistic(
    rows: &[EventFeatureRow],
    labels: &[SeverityLabel],
    l2: f64,
    schema: &FeatureSchema,
) -> Result<LinearModel, ModelError> {
    assert_eq!(rows.len(), labels.len());
    let n = rows.len();
    if n == 0 {
        return Err(ModelError::DegenerateInput("empty training set".into()));
    }
    let d = rows[0].values.len();
    let label_idx: Vec<usize> = labels.iter().map(|l| l.as_index()).collect();
    let mut counts = [0usize; N_CLASSES];
    for &y in &label_idx {
        counts[y] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ModelError::DegenerateInput(
            "logistic baseline needs at least two classes present".into(),
        ));
    }

    let data = DataMatrix::from_rows(rows, d);
    let (means, scales) = standardization(&data);

    // Design matrix with a trailing bias column; missing values sit at the
    // standardized mean (0).
    let db = d + 1;
    let mut x = DMatrix::zeros(n, db);
    for i in 0..n {
        for j in 0..d {
            if let Some(v) = data.get(i, j) {
                x[(i, j)] = (v - means[j]) / scales[j];
            }
        }
        x[(i, d)] = 1.0;
    }

    // Parameters in class blocks of (d weights + 1 bias).
    let p_dim = N_CLASSES * db;
    let mut theta = DVector::<f64>::zeros(p_dim);

    let theta_mat = |t: &DVector<f64>| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(db, N_CLASSES);
        for c in 0..N_CLASSES {
            for j in 0..db {
                m[(j, c)] = t[c * db + j];
            }
        }
        m
    };
    let reg_term = |t: &DVector<f64>| -> f64 {
        let mut s = 0.0;
        for c in 0..N_CLASSES {
            for j in 0..d {
                s += t[c * db + j] * t[c * db + j];
            }
        }
        0.5 * l2 * s
    };
    let loss_at = |t: &DVector<f64>| -> f64 {
        let scores = &x * theta_mat(t);
        let mut loss = 0.0;
        for i in 0..n {
            let row = [scores[(i, 0)], scores[(i, 1)], scores[(i, 2)]];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            loss += lse - row[label_idx[i]];
        }
        loss + reg_term(t)
    };

    let mut loss = loss_at(&theta);
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;

    for _ in 0..MAX_ITERS {
        let scores = &x * theta_mat(&theta);
        let mut p = DMatrix::zeros(n, N_CLASSES);
        for i in 0..n {
            let row = softmax(&[scores[(i, 0)], scores[(i, 1)], scores[(i, 2)]]);
            for c in 0..N_CLASSES {
                p[(i, c)] = row[c];
            }
        }

        let mut resid = p.clone();
        for i in 0..n {
            resid[(i, label_idx[i])] -= 1.0;
        }
        let grad_mat = x.transpose() * &resid; // db × K
        let mut grad = DVector::zeros(p_dim);
        for c in 0..N_CLASSES {
            for j in 0..db {
                let mut g = grad_mat[(j, c)];
                if j < d {
                    g += l2 * theta[c * db + j];
                }
                grad[c * db + j] = g;
            }
        }
        grad_norm = grad.norm();
        if grad_norm <= GRAD_TOL {
            converged = true;
            break;
        }

        // Newton system: block (c,k) = Xᵀ diag(p_c(δ−p_k)) X, mirrored.
        let mut h = DMatrix::zeros(p_dim, p_dim);
        for c in 0..N_CLASSES {
            for k in c..N_CLASSES {
                let mut scaled = x.clone();
                for i in 0..n {
                    let w = p[(i, c)] * (if c == k { 1.0 } else { 0.0 } - p[(i, k)]);
                    for j in 0..db {
                        scaled[(i, j)] *= w;
                    }
                }
                let block = x.transpose() * scaled;
                for a in 0..db {
                    for b in 0..db {
                        h[(c * db + a, k * db + b)] += block[(a, b)];
                        if k != c {
                            h[(k * db + a, c * db + b)] += block[(b, a)];
                        }
                    }
                }
            }
        }
        for c in 0..N_CLASSES {
            for j in 0..d {
                h[(c * db + j, c * db + j)] += l2;
            }
            h[(c * db + d, c * db + d)] += BIAS_RIDGE;
        }

        // Cholesky with escalating ridge if the factorization fails.
        let mut ridge = 0.0;
        let step = loop {
            let mut hr = h.clone();
            if ridge > 0.0 {
                for j in 0..p_dim {
                    hr[(j, j)] += ridge;
                }
            }
            match nalgebra::Cholesky::new(hr) {
                Some(chol) => break chol.solve(&grad),
                None => {
                    ridge = if ridge == 0.0 { 1e-8 } else { ridge * 100.0 };
                    assert!(ridge < 1.0, "Hessian could not be stabilized");
                }
            }
        };

        // Damped update: halve until the loss stops increasing.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - t * &step;
            let cand_loss = loss_at(&cand);
            if cand_loss <= loss + 1e-12 {
                theta = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // no descent possible; report unconverged
        }
    }

    let mut weights = vec![0.0; N_CLASSES * d];
    let mut bias = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        for j in 0..d {
            weights[c * d + j] = theta[c * db + j];
        }
        bias[c] = theta[c * db + d];
    }
    Ok(LinearModel {
        weights,
        bias,
        means,
        scales,
        l2,
        n_features: d,
        schema_hash: schema.hash(),
        converged,
        grad_norm,
    })
}
