//! Random forest over class-probability trees: bootstrap resamples,
//! per-node random feature subsets of size ceil(sqrt(d)), and weighted
//! Gini impurity with class weights acting as sample weights.

use super::tree::{BinnedMatrix, Tree, TreeNode, EXACT_SPLIT_MAX, MAX_BINS, MISSING_BIN};
use super::DataMatrix;
use crate::rng::{derive_seed, stream_rng};
use crate::schema::{EventFeatureRow, FeatureSchema, SeverityLabel, N_CLASSES};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Minimum samples (with bootstrap multiplicity) per child.
    pub min_leaf: usize,
    pub class_weights: [f64; N_CLASSES],
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 300,
            max_depth: 12,
            min_leaf: 20,
            class_weights: [1.0; N_CLASSES],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    /// Leaves hold weighted class distributions (length 3, summing to 1).
    pub trees: Vec<Tree>,
    pub class_weights: [f64; N_CLASSES],
    pub n_features: usize,
    pub schema_hash: u64,
}

impl ForestModel {
    /// Mean of the per-tree leaf distributions.
    pub fn predict_row(&self, values: &[f64], missing: &[bool]) -> [f64; N_CLASSES] {
        let mut acc = [0.0; N_CLASSES];
        for tree in &self.trees {
            let leaf = tree.leaf_values(values, missing);
            for c in 0..N_CLASSES {
                acc[c] += leaf[c];
            }
        }
        let sum: f64 = acc.iter().sum();
        if sum > 0.0 {
            for v in &mut acc {
                *v /= sum;
            }
        }
        acc
    }
}

pub fn fit_random_forest(
    rows: &[EventFeatureRow],
    labels: &[SeverityLabel],
    config: &ForestConfig,
    schema: &FeatureSchema,
) -> ForestModel {
    assert_eq!(rows.len(), labels.len());
    assert!(!rows.is_empty(), "cannot fit on an empty training set");
    let n = rows.len();
    let n_features = rows[0].values.len();
    let data = DataMatrix::from_rows(rows, n_features);
    let binned = BinnedMatrix::build(&data, MAX_BINS);
    let label_idx: Vec<usize> = labels.iter().map(|l| l.as_index()).collect();

    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(derive_seed(config.seed, t as u64), 0xf02e57);
            let boot: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
            let mut nodes = Vec::new();
            grow(&mut nodes, &data, &binned, boot, &label_idx, config, &mut rng, 0);
            Tree { nodes }
        })
        .collect();

    ForestModel {
        trees,
        class_weights: config.class_weights,
        n_features,
        schema_hash: schema.hash(),
    }
}

struct GiniSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

#[allow(clippy::too_many_arguments)]
fn grow(
    nodes: &mut Vec<TreeNode>,
    data: &DataMatrix,
    binned: &BinnedMatrix,
    rows: Vec<u32>,
    label_idx: &[usize],
    config: &ForestConfig,
    rng: &mut ChaCha8Rng,
    depth: usize,
) -> u32 {
    let id = nodes.len() as u32;
    nodes.push(TreeNode::leaf(Vec::new(), 0.0));

    let mut w = [0.0; N_CLASSES];
    let mut raw = [0usize; N_CLASSES];
    for &r in &rows {
        let y = label_idx[r as usize];
        w[y] += config.class_weights[y];
        raw[y] += 1;
    }
    let w_total: f64 = w.iter().sum();
    let pure = raw.iter().filter(|&&c| c > 0).count() <= 1;

    if !pure && depth < config.max_depth && rows.len() >= 2 * config.min_leaf.max(1) {
        // Feature subset is drawn per node, even when no split is kept.
        let k = (data.n_features as f64).sqrt().ceil() as usize;
        let mut cols = sample(rng, data.n_features, k.min(data.n_features)).into_vec();
        cols.sort_unstable();
        if let Some(split) = best_gini_split(data, binned, &rows, label_idx, &cols, config, &w) {
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| {
                let ri = r as usize;
                data.is_missing(ri, split.feature) || data.value(ri, split.feature) < split.threshold
            });
            let left = grow(nodes, data, binned, left_rows, label_idx, config, rng, depth + 1);
            let right = grow(nodes, data, binned, right_rows, label_idx, config, rng, depth + 1);
            nodes[id as usize] = TreeNode {
                feature_index: split.feature as i32,
                threshold: split.threshold,
                left,
                right,
                cover: w_total,
                values: Vec::new(),
            };
            return id;
        }
    }

    let dist: Vec<f64> = w.iter().map(|&x| x / w_total).collect();
    nodes[id as usize] = TreeNode::leaf(dist, w_total);
    id
}

/// Score Σ_c W_c²/W; the weighted Gini gain of a split is
/// score(L) + score(R) − score(parent).
#[inline]
fn score(w: &[f64; N_CLASSES]) -> f64 {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    w.iter().map(|&x| x * x).sum::<f64>() / total
}

#[allow(clippy::too_many_arguments)]
fn best_gini_split(
    data: &DataMatrix,
    binned: &BinnedMatrix,
    rows: &[u32],
    label_idx: &[usize],
    cols: &[usize],
    config: &ForestConfig,
    w_parent: &[f64; N_CLASSES],
) -> Option<GiniSplit> {
    let parent_score = score(w_parent);
    let n = rows.len();
    let min_count = config.min_leaf.max(1);
    let mut best: Option<GiniSplit> = None;

    for &f in cols {
        let consider =
            |threshold: f64, wl: &[f64; N_CLASSES], nl: usize, best: &mut Option<GiniSplit>| {
                let nr = n - nl;
                if nl < min_count || nr < min_count {
                    return;
                }
                let mut wr = [0.0; N_CLASSES];
                for c in 0..N_CLASSES {
                    wr[c] = w_parent[c] - wl[c];
                }
                let gain = score(wl) + score(&wr) - parent_score;
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    *best = Some(GiniSplit { feature: f, threshold, gain });
                }
            };

        if n <= EXACT_SPLIT_MAX {
            let mut present: Vec<(f64, usize)> = Vec::with_capacity(n);
            let mut wl = [0.0; N_CLASSES];
            let mut nl = 0usize;
            for &r in rows {
                let ri = r as usize;
                match data.get(ri, f) {
                    Some(v) => present.push((v, label_idx[ri])),
                    None => {
                        wl[label_idx[ri]] += config.class_weights[label_idx[ri]];
                        nl += 1;
                    }
                }
            }
            present.sort_by(|a, b| a.0.total_cmp(&b.0));
            for i in 0..present.len().saturating_sub(1) {
                let (v, y) = present[i];
                wl[y] += config.class_weights[y];
                nl += 1;
                let v_next = present[i + 1].0;
                if v_next <= v {
                    continue;
                }
                let threshold = v + (v_next - v) / 2.0;
                if threshold <= v {
                    continue;
                }
                consider(threshold, &wl, nl, &mut best);
            }
        } else {
            let cuts = &binned.cuts[f];
            if cuts.is_empty() {
                continue;
            }
            let n_bins = cuts.len() + 1;
            let mut bin_w = vec![[0.0; N_CLASSES]; n_bins];
            let mut bin_n = vec![0usize; n_bins];
            let mut wl = [0.0; N_CLASSES];
            let mut nl = 0usize;
            for &r in rows {
                let ri = r as usize;
                let y = label_idx[ri];
                let code = binned.code(ri, f);
                if code == MISSING_BIN {
                    wl[y] += config.class_weights[y];
                    nl += 1;
                } else {
                    bin_w[code as usize][y] += config.class_weights[y];
                    bin_n[code as usize] += 1;
                }
            }
            for (b, cut) in cuts.iter().enumerate() {
                for c in 0..N_CLASSES {
                    wl[c] += bin_w[b][c];
                }
                nl += bin_n[b];
                consider(*cut, &wl, nl, &mut best);
            }
        }
    }
    best
}
