//! Class-imbalance mitigation: inverse-frequency weights, random
//! oversampling of the fatal class, and SMOTE over standardized numeric
//! features.
//!
//! The resampling operations never modify original rows; they only append.
//! Both sort the fatal pool by collision_id before sampling, so the set of
//! appended rows depends only on the data and the seed, not on input order.

use crate::schema::{EventFeatureRow, FeatureKind, FeatureSchema, SeverityLabel, N_CLASSES};
use crate::rng::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImbalanceError {
    #[error("class {0} has zero count; weights are undefined (merge classes or abstain)")]
    ZeroClassCount(usize),
    #[error("no Fatal rows to oversample")]
    NoFatalRows,
    #[error("SMOTE needs at least 2 Fatal rows (got {0}); use random_oversample instead")]
    TooFewFatalRows(usize),
    #[error("invalid strategy parameter: {0}")]
    InvalidParameter(String),
}

/// How the trainer compensates for the rare fatal class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ImbalanceStrategy {
    Baseline,
    Weighted,
    Oversample { target_fatal_share: f64 },
    Smote { k_neighbors: usize, target_fatal_share: f64 },
    Focal { gamma: f64 },
}

impl ImbalanceStrategy {
    /// Name used in reports and the ablation CSV.
    pub fn name(&self) -> &'static str {
        match self {
            ImbalanceStrategy::Baseline => "Baseline",
            ImbalanceStrategy::Weighted => "Weighted",
            ImbalanceStrategy::Oversample { .. } => "Oversample",
            ImbalanceStrategy::Smote { .. } => "SMOTE",
            ImbalanceStrategy::Focal { .. } => "FocalLoss",
        }
    }

    pub fn validate(&self) -> Result<(), ImbalanceError> {
        let share_ok = |s: f64| s > 0.0 && s < 0.5;
        match *self {
            ImbalanceStrategy::Oversample { target_fatal_share } if !share_ok(target_fatal_share) => {
                Err(ImbalanceError::InvalidParameter(format!(
                    "target_fatal_share {target_fatal_share} not in (0, 0.5)"
                )))
            }
            ImbalanceStrategy::Smote { k_neighbors, target_fatal_share } => {
                if !share_ok(target_fatal_share) {
                    Err(ImbalanceError::InvalidParameter(format!(
                        "target_fatal_share {target_fatal_share} not in (0, 0.5)"
                    )))
                } else if k_neighbors == 0 {
                    Err(ImbalanceError::InvalidParameter("k_neighbors must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            ImbalanceStrategy::Focal { gamma } if gamma < 0.0 => Err(
                ImbalanceError::InvalidParameter(format!("gamma {gamma} must be >= 0")),
            ),
            _ => Ok(()),
        }
    }
}

/// What a resampling pass did, for run reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AugmentationReport {
    pub originals: [u64; N_CLASSES],
    pub added: [u64; N_CLASSES],
    pub achieved_fatal_share: f64,
}

pub fn class_counts(rows: &[EventFeatureRow]) -> [u64; N_CLASSES] {
    let mut counts = [0u64; N_CLASSES];
    for r in rows {
        counts[r.label.as_index()] += 1;
    }
    counts
}

/// Inverse-frequency class weights w_c = N / (K * n_c), so that
/// sum_c w_c * n_c = N.
pub fn compute_class_weights(class_counts: [u64; N_CLASSES]) -> Result<[f64; N_CLASSES], ImbalanceError> {
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(ImbalanceError::ZeroClassCount(c));
    }
    let n: u64 = class_counts.iter().sum();
    let mut w = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        w[c] = n as f64 / (N_CLASSES as f64 * class_counts[c] as f64);
    }
    Ok(w)
}

/// Smallest number of extra fatal rows so that
/// (fatal + a) / (total + a) >= target. The comparison carries a 1e-9
/// slack so exact-boundary targets are not missed to float rounding.
fn minimal_additional(fatal: u64, total: u64, target: f64) -> u64 {
    let reaches = |a: u64| (fatal + a) as f64 >= target * (total + a) as f64 - 1e-9;
    if reaches(0) {
        return 0;
    }
    let guess = ((target * total as f64 - fatal as f64) / (1.0 - target) - 3.0).max(0.0) as u64;
    let mut a = guess;
    while !reaches(a) {
        a += 1;
    }
    a
}

fn sorted_fatal_indices(rows: &[EventFeatureRow]) -> Vec<usize> {
    let mut idx: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == SeverityLabel::Fatal)
        .map(|(i, _)| i)
        .collect();
    idx.sort_by_key(|&i| rows[i].collision_id);
    idx
}

/// Appends exact copies of randomly chosen Fatal rows until the fatal
/// share reaches `target_fatal_share` with the minimal added count.
pub fn random_oversample(
    rows: &[EventFeatureRow],
    target_fatal_share: f64,
    rng_seed: u64,
) -> Result<(Vec<EventFeatureRow>, AugmentationReport), ImbalanceError> {
    let fatal_idx = sorted_fatal_indices(rows);
    if fatal_idx.is_empty() {
        return Err(ImbalanceError::NoFatalRows);
    }
    let originals = class_counts(rows);
    let fatal = originals[SeverityLabel::Fatal.as_index()];
    let add = minimal_additional(fatal, rows.len() as u64, target_fatal_share);

    let mut rng = stream_rng(rng_seed, 0x05e0);
    let mut out = rows.to_vec();
    out.reserve(add as usize);
    for _ in 0..add {
        let pick = fatal_idx[rng.random_range(0..fatal_idx.len())];
        out.push(rows[pick].clone());
    }
    let achieved = (fatal + add) as f64 / out.len() as f64;
    Ok((
        out,
        AugmentationReport {
            originals,
            added: [0, 0, add],
            achieved_fatal_share: achieved,
        },
    ))
}

/// SMOTE: synthesizes Fatal rows by interpolating numeric features
/// between a random Fatal seed row and one of its k nearest Fatal
/// neighbors in z-score-standardized numeric space. Binary and
/// categorical features and missing masks are copied from the seed row.
/// Synthetic rows get collision_id -1, -2, ... in generation order.
pub fn smote(
    rows: &[EventFeatureRow],
    k_neighbors: usize,
    target_fatal_share: f64,
    rng_seed: u64,
    schema: &FeatureSchema,
) -> Result<(Vec<EventFeatureRow>, AugmentationReport), ImbalanceError> {
    if k_neighbors == 0 {
        return Err(ImbalanceError::InvalidParameter("k_neighbors must be >= 1".into()));
    }
    let fatal_idx = sorted_fatal_indices(rows);
    if fatal_idx.len() < 2 {
        return Err(ImbalanceError::TooFewFatalRows(fatal_idx.len()));
    }
    let k = k_neighbors.min(fatal_idx.len() - 1);

    let numeric: Vec<usize> = schema
        .descriptors()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.kind == FeatureKind::Numeric)
        .map(|(i, _)| i)
        .collect();

    // Standardization statistics from the full training input.
    let (means, scales) = numeric_stats(rows, &numeric);
    let z = |row: &EventFeatureRow, f_pos: usize| -> Option<f64> {
        let f = numeric[f_pos];
        row.value(f).map(|v| (v - means[f_pos]) / scales[f_pos])
    };

    // k nearest fatal neighbors per fatal row; distance over numeric
    // features present in both rows, ties broken by collision_id.
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(fatal_idx.len());
    for (a_pos, &a) in fatal_idx.iter().enumerate() {
        let mut dists: Vec<(f64, i64, usize)> = Vec::with_capacity(fatal_idx.len() - 1);
        for (b_pos, &b) in fatal_idx.iter().enumerate() {
            if b_pos == a_pos {
                continue;
            }
            let mut d2 = 0.0;
            for f_pos in 0..numeric.len() {
                if let (Some(za), Some(zb)) = (z(&rows[a], f_pos), z(&rows[b], f_pos)) {
                    d2 += (za - zb) * (za - zb);
                }
            }
            dists.push((d2, rows[b].collision_id, b_pos));
        }
        dists.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        neighbors.push(dists.into_iter().take(k).map(|(_, _, pos)| pos).collect());
    }

    let originals = class_counts(rows);
    let fatal = originals[SeverityLabel::Fatal.as_index()];
    let add = minimal_additional(fatal, rows.len() as u64, target_fatal_share);

    let mut rng = stream_rng(rng_seed, 0x50f3);
    let mut out = rows.to_vec();
    out.reserve(add as usize);
    for i in 0..add {
        let seed_pos = rng.random_range(0..fatal_idx.len());
        let nb_pos = neighbors[seed_pos][rng.random_range(0..k)];
        let u: f64 = rng.random_range(0.0..1.0);
        let seed_row = &rows[fatal_idx[seed_pos]];
        let nb_row = &rows[fatal_idx[nb_pos]];

        let mut synth = seed_row.clone();
        synth.collision_id = -((i + 1) as i64);
        for &f in &numeric {
            if let (Some(a), Some(b)) = (seed_row.value(f), nb_row.value(f)) {
                synth.values[f] = a + u * (b - a);
            }
        }
        out.push(synth);
    }
    let achieved = (fatal + add) as f64 / out.len() as f64;
    Ok((
        out,
        AugmentationReport {
            originals,
            added: [0, 0, add],
            achieved_fatal_share: achieved,
        },
    ))
}

/// Per-feature mean and standard deviation over non-missing values.
/// Zero-variance or all-missing features get scale 1 so that z-scores
/// stay finite.
fn numeric_stats(rows: &[EventFeatureRow], numeric: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; numeric.len()];
    let mut scales = vec![1.0; numeric.len()];
    for (f_pos, &f) in numeric.iter().enumerate() {
        let mut n = 0.0;
        let mut sum = 0.0;
        for r in rows {
            if let Some(v) = r.value(f) {
                n += 1.0;
                sum += v;
            }
        }
        if n == 0.0 {
            continue;
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for r in rows {
            if let Some(v) = r.value(f) {
                ss += (v - mean) * (v - mean);
            }
        }
        let sd = (ss / n).sqrt();
        means[f_pos] = mean;
        if sd > 0.0 {
            scales[f_pos] = sd;
        }
    }
    (means, scales)
}
