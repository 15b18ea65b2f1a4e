//! Second-order gradient boosting: per round, one tree per class fit to
//! that class's gradient/hessian, margins updated by η times the leaf
//! values, probabilities via softmax over the three class margins.

use super::objective::ObjectiveKind;
use super::tree::{fit_tree_on, subsample_columns, BinnedMatrix, Tree, TreeConfig, MAX_BINS};
use super::{softmax, DataMatrix};
use crate::rng::{derive_seed, stream_rng};
use crate::schema::{EventFeatureRow, FeatureSchema, SeverityLabel, N_CLASSES};
use rand::seq::index::sample;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct BoostingConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub row_subsample: f64,
    pub col_subsample: f64,
    pub lambda: f64,
    pub min_leaf_weight: f64,
    pub class_weights: [f64; N_CLASSES],
    pub seed: u64,
}

impl Default for BoostingConfig {
    fn default() -> Self {
        BoostingConfig {
            n_rounds: 400,
            max_depth: 8,
            learning_rate: 0.05,
            row_subsample: 0.8,
            col_subsample: 0.8,
            lambda: 1.0,
            min_leaf_weight: 1.0,
            class_weights: [1.0; N_CLASSES],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedModel {
    /// One tree per class per round.
    pub rounds: Vec<[Tree; N_CLASSES]>,
    pub learning_rate: f64,
    /// Per-class initial margin (log class prior).
    pub base_score: [f64; N_CLASSES],
    pub lambda: f64,
    pub n_features: usize,
    pub schema_hash: u64,
    /// Weighted full-train loss before boosting and after each round.
    pub train_loss: Vec<f64>,
}

impl BoostedModel {
    /// margin(x, c) = base_score[c] + η · Σ_rounds leaf_value_c(x).
    pub fn predict_margins(&self, values: &[f64], missing: &[bool]) -> [f64; N_CLASSES] {
        let mut m = self.base_score;
        for round in &self.rounds {
            for (c, tree) in round.iter().enumerate() {
                m[c] += self.learning_rate * tree.leaf_values(values, missing)[0];
            }
        }
        m
    }

    pub fn predict_row(&self, values: &[f64], missing: &[bool]) -> [f64; N_CLASSES] {
        softmax(&self.predict_margins(values, missing))
    }
}

fn subsample_rows(n: usize, fraction: f64, rng_seed: u64) -> Vec<u32> {
    if fraction >= 1.0 {
        return (0..n as u32).collect();
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut rng = stream_rng(rng_seed, 0x0e05);
    let mut idx: Vec<u32> = sample(&mut rng, n, k).into_iter().map(|i| i as u32).collect();
    idx.sort_unstable();
    idx
}

/// Fits a boosted model. base_score is the per-class log prior; each round
/// fits one tree per class on fresh row/column subsamples, then the round
/// is accepted only if the full-train weighted loss does not increase —
/// when it would, the round's leaf values are halved (deterministically,
/// up to 60 times) until it does not, so the recorded loss trace is
/// non-increasing by construction.
pub fn fit_gradient_boosting(
    rows: &[EventFeatureRow],
    labels: &[SeverityLabel],
    objective: ObjectiveKind,
    config: &BoostingConfig,
    schema: &FeatureSchema,
) -> BoostedModel {
    assert_eq!(rows.len(), labels.len());
    assert!(!rows.is_empty(), "cannot fit on an empty training set");
    let n = rows.len();
    let n_features = rows[0].values.len();
    let data = DataMatrix::from_rows(rows, n_features);
    let binned = BinnedMatrix::build(&data, MAX_BINS);
    let label_idx: Vec<usize> = labels.iter().map(|l| l.as_index()).collect();

    let mut counts = [0usize; N_CLASSES];
    for &l in &label_idx {
        counts[l] += 1;
    }
    let mut base_score = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        base_score[c] = ((counts[c] as f64 / n as f64).max(1e-12)).ln();
    }

    let weights = config.class_weights;
    let full_loss = |margins: &[[f64; N_CLASSES]]| -> f64 {
        margins
            .iter()
            .zip(&label_idx)
            .map(|(m, &y)| objective.loss(m, y, &weights))
            .sum()
    };

    let mut margins = vec![base_score; n];
    let mut train_loss = Vec::with_capacity(config.n_rounds + 1);
    let mut prev_loss = full_loss(&margins);
    train_loss.push(prev_loss);

    let tree_config = TreeConfig {
        max_depth: config.max_depth,
        min_leaf_weight: config.min_leaf_weight,
        lambda: config.lambda,
        col_subsample: 1.0, // columns pre-sampled below
        seed: 0,
    };

    let mut rounds: Vec<[Tree; N_CLASSES]> = Vec::with_capacity(config.n_rounds);
    for round in 0..config.n_rounds {
        // Per-class gradient/hessian at the current margins.
        let mut grads = vec![[0.0; N_CLASSES]; n];
        let mut hesss = vec![[0.0; N_CLASSES]; n];
        for i in 0..n {
            let (g, h) = objective.grad_hess(&margins[i], label_idx[i], &weights);
            grads[i] = g;
            hesss[i] = h;
        }

        let mut trees: Vec<Tree> = (0..N_CLASSES)
            .into_par_iter()
            .map(|c| {
                let tree_seed = derive_seed(config.seed, 1 + (round * N_CLASSES + c) as u64);
                let row_ids = subsample_rows(n, config.row_subsample, tree_seed);
                let cols = subsample_columns(n_features, config.col_subsample, tree_seed);
                let g_c: Vec<f64> = grads.iter().map(|g| g[c]).collect();
                let h_c: Vec<f64> = hesss.iter().map(|h| h[c]).collect();
                fit_tree_on(&data, &binned, row_ids, &g_c, &h_c, &cols, &tree_config)
            })
            .collect();

        // Raw leaf deltas for every training row.
        let deltas: Vec<[f64; N_CLASSES]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (v, m) = data.row(i);
                let mut d = [0.0; N_CLASSES];
                for c in 0..N_CLASSES {
                    d[c] = trees[c].leaf_values(v, m)[0];
                }
                d
            })
            .collect();

        let eta = config.learning_rate;
        let candidate = |scale: f64, margins: &[[f64; N_CLASSES]]| -> Vec<[f64; N_CLASSES]> {
            margins
                .iter()
                .zip(&deltas)
                .map(|(m, d)| {
                    let mut out = *m;
                    for c in 0..N_CLASSES {
                        out[c] += eta * scale * d[c];
                    }
                    out
                })
                .collect()
        };

        let mut scale = 1.0;
        let mut next_margins = candidate(scale, &margins);
        let mut next_loss = full_loss(&next_margins);
        let mut halvings = 0;
        while next_loss > prev_loss + 1e-12 && halvings < 60 {
            scale *= 0.5;
            halvings += 1;
            next_margins = candidate(scale, &margins);
            next_loss = full_loss(&next_margins);
        }
        if next_loss > prev_loss + 1e-12 {
            // Give up on this round entirely; margins stay put.
            scale = 0.0;
            next_margins = margins.clone();
            next_loss = prev_loss;
        }
        if scale != 1.0 {
            for tree in &mut trees {
                for node in &mut tree.nodes {
                    for v in &mut node.values {
                        *v *= scale;
                    }
                }
            }
        }

        margins = next_margins;
        prev_loss = next_loss;
        train_loss.push(next_loss);

        let mut it = trees.into_iter();
        rounds.push([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]);
    }

    BoostedModel {
        rounds,
        learning_rate: config.learning_rate,
        base_score,
        lambda: config.lambda,
        n_features,
        schema_hash: schema.hash(),
        train_loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{canonical_schema, Timestamp};
    use rand::Rng;

    fn toy_rows(n: usize, d: usize, seed: u64) -> (Vec<EventFeatureRow>, Vec<SeverityLabel>) {
        let mut rng = stream_rng(seed, 0x70b5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let values: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            // Class logit driven by feature 0 with noise; class 2 rare.
            let z = values[0] * 2.0 + rng.random_range(-0.8..0.8);
            let label = if z > 1.8 {
                SeverityLabel::Fatal
            } else if z > 0.0 {
                SeverityLabel::Injury
            } else {
                SeverityLabel::NoInjury
            };
            rows.push(EventFeatureRow {
                collision_id: i as i64,
                timestamp: Timestamp(i as i64),
                label,
                values,
                missing: vec![false; d],
                factors: vec![],
            });
            labels.push(label);
        }
        (rows, labels)
    }

    #[test]
    fn prior_only_model_predicts_class_prior() {
        let (rows, mut labels) = toy_rows(10, 2, 1);
        // Force a known prior: 6 / 3 / 1.
        for (i, l) in labels.iter_mut().enumerate() {
            *l = match i {
                0..=5 => SeverityLabel::NoInjury,
                6..=8 => SeverityLabel::Injury,
                _ => SeverityLabel::Fatal,
            };
        }
        let config = BoostingConfig { n_rounds: 0, ..BoostingConfig::default() };
        let model = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::WeightedSoftmax,
            &config,
            &canonical_schema(),
        );
        for row in &rows {
            let p = model.predict_row(&row.values, &row.missing);
            assert!((p[0] - 0.6).abs() < 1e-12);
            assert!((p[1] - 0.3).abs() < 1e-12);
            assert!((p[2] - 0.1).abs() < 1e-12);
        }
        assert_eq!(model.train_loss.len(), 1);
    }

    #[test]
    fn one_round_margin_is_base_plus_scaled_leaf() {
        let (rows, labels) = toy_rows(120, 3, 2);
        let config = BoostingConfig {
            n_rounds: 1,
            max_depth: 3,
            ..BoostingConfig::default()
        };
        let model = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::WeightedSoftmax,
            &config,
            &canonical_schema(),
        );
        for row in rows.iter().take(20) {
            let margins = model.predict_margins(&row.values, &row.missing);
            for c in 0..3 {
                let leaf = model.rounds[0][c].leaf_values(&row.values, &row.missing)[0];
                let expect = model.base_score[c] + 0.05 * leaf;
                assert!((margins[c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let (rows, labels) = toy_rows(300, 4, 3);
        let config = BoostingConfig {
            n_rounds: 30,
            max_depth: 3,
            class_weights: [1.0, 1.2, 4.0],
            ..BoostingConfig::default()
        };
        let model = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::WeightedSoftmax,
            &config,
            &canonical_schema(),
        );
        assert_eq!(model.train_loss.len(), 31);
        for w in model.train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss increased: {} -> {}", w[0], w[1]);
        }
        // And it actually learned something.
        assert!(model.train_loss.last().unwrap() < &(model.train_loss[0] * 0.9));
    }

    #[test]
    fn focal_objective_trains_and_stays_monotone() {
        let (rows, labels) = toy_rows(250, 3, 4);
        let config = BoostingConfig {
            n_rounds: 25,
            max_depth: 3,
            class_weights: [1.0, 1.0, 8.0],
            ..BoostingConfig::default()
        };
        let model = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::Focal { gamma: 2.0 },
            &config,
            &canonical_schema(),
        );
        for w in model.train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        for row in rows.iter().take(10) {
            let p = model.predict_row(&row.values, &row.missing);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_reproduces_bit_identical_model() {
        let (rows, labels) = toy_rows(200, 4, 5);
        let config = BoostingConfig {
            n_rounds: 8,
            max_depth: 4,
            seed: 42,
            ..BoostingConfig::default()
        };
        let a = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::WeightedSoftmax,
            &config,
            &canonical_schema(),
        );
        let b = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::WeightedSoftmax,
            &config,
            &canonical_schema(),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn planted_monotone_feature_raises_fatal_probability() {
        let (rows, labels) = toy_rows(800, 3, 6);
        let config = BoostingConfig {
            n_rounds: 40,
            max_depth: 3,
            class_weights: [1.0, 1.0, 6.0],
            ..BoostingConfig::default()
        };
        let model = fit_gradient_boosting(
            &rows,
            &labels,
            ObjectiveKind::WeightedSoftmax,
            &config,
            &canonical_schema(),
        );
        let mut sorted: Vec<f64> = rows.iter().map(|r| r.values[0]).collect();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[sorted.len() / 10];
        let hi = sorted[sorted.len() * 9 / 10];
        let mean_fatal = |x0: f64| {
            let mut total = 0.0;
            let mut count = 0.0;
            for row in &rows {
                let mut v = row.values.clone();
                v[0] = x0;
                total += model.predict_row(&v, &row.missing)[2];
                count += 1.0;
            }
            total / count
        };
        assert!(
            mean_fatal(hi) > mean_fatal(lo),
            "fatal probability must increase with the planted feature"
        );
    }
}
