//! Single decision tree: flat node storage, deterministic greedy fitting
//! against per-sample gradients/hessians, and the shared value-binning
//! used by every ensemble.
//!
//! Routing rule everywhere: go left iff feature value < threshold; missing
//! values always go left.

use super::DataMatrix;
use crate::rng::stream_rng;
use crate::schema::EventFeatureRow;
use rand::seq::index::sample;

/// Nodes at or below this many samples enumerate exact midpoint
/// thresholds; larger nodes use the binned histogram.
pub const EXACT_SPLIT_MAX: usize = 64;
pub const MAX_BINS: usize = 256;
pub const MISSING_BIN: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    /// Split feature, or -1 for a leaf.
    pub feature_index: i32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Summed hessian (boosting) or sample weight (forest) that reached
    /// this node.
    pub cover: f64,
    /// Leaf values (one per output); empty on internal nodes.
    pub values: Vec<f64>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.feature_index < 0
    }

    pub(crate) fn leaf(values: Vec<f64>, cover: f64) -> TreeNode {
        TreeNode {
            feature_index: -1,
            threshold: 0.0,
            left: 0,
            right: 0,
            cover,
            values,
        }
    }
}

/// Flat-array tree; node 0 is the root, children always follow parents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Index of the leaf this input reaches.
    #[inline]
    pub fn route(&self, values: &[f64], missing: &[bool]) -> usize {
        let mut i = 0usize;
        loop {
            let node = &self.nodes[i];
            if node.feature_index < 0 {
                return i;
            }
            let f = node.feature_index as usize;
            i = if missing[f] || values[f] < node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    #[inline]
    pub fn leaf_values(&self, values: &[f64], missing: &[bool]) -> &[f64] {
        &self.nodes[self.route(values, missing)].values
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Checks cover(parent) = cover(left) + cover(right) on every internal
    /// node, within relative tolerance.
    pub fn cover_consistent(&self, rel_tol: f64) -> bool {
        self.nodes.iter().all(|n| {
            if n.is_leaf() {
                return true;
            }
            let sum = self.nodes[n.left as usize].cover + self.nodes[n.right as usize].cover;
            (n.cover - sum).abs() <= rel_tol * n.cover.abs() + 1e-12
        })
    }
}

/// Per-feature quantile cut points and per-cell bin codes, built once per
/// training matrix and shared across all trees of an ensemble.
///
/// Codes satisfy: value < cuts[f][b] ⟺ code ≤ b, so a histogram split at
/// cut b is exactly the routing predicate "value < cuts[f][b]".
pub struct BinnedMatrix {
    pub n_rows: usize,
    pub n_features: usize,
    codes: Vec<u16>,
    pub cuts: Vec<Vec<f64>>,
}

impl BinnedMatrix {
    pub fn build(data: &DataMatrix, max_bins: usize) -> BinnedMatrix {
        assert!(max_bins >= 2 && max_bins <= u16::MAX as usize);
        let mut cuts: Vec<Vec<f64>> = Vec::with_capacity(data.n_features);
        for f in 0..data.n_features {
            let mut vals: Vec<f64> = (0..data.n_rows).filter_map(|r| data.get(r, f)).collect();
            vals.sort_by(f64::total_cmp);
            let mut c: Vec<f64> = Vec::new();
            for k in 1..max_bins {
                let idx = k * vals.len() / max_bins;
                if idx == 0 || idx >= vals.len() {
                    continue;
                }
                let v = vals[idx];
                if c.last().is_none_or(|&last| v > last) {
                    c.push(v);
                }
            }
            cuts.push(c);
        }
        let mut codes = vec![0u16; data.n_rows * data.n_features];
        for r in 0..data.n_rows {
            for f in 0..data.n_features {
                codes[r * data.n_features + f] = match data.get(r, f) {
                    None => MISSING_BIN,
                    Some(v) => cuts[f].partition_point(|c| *c <= v) as u16,
                };
            }
        }
        BinnedMatrix {
            n_rows: data.n_rows,
            n_features: data.n_features,
            codes,
            cuts,
        }
    }

    #[inline]
    pub fn code(&self, row: usize, feature: usize) -> u16 {
        self.codes[row * self.n_features + feature]
    }
}

#[derive(Debug, Clone)]
pub struct TreeConfig {
    pub max_depth: usize,
    /// Minimum summed hessian per child.
    pub min_leaf_weight: f64,
    pub lambda: f64,
    /// Fraction of features available to this tree.
    pub col_subsample: f64,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 8,
            min_leaf_weight: 1.0,
            lambda: 1.0,
            col_subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Fits one regression tree to second-order pseudo-residuals.
///
/// Split gain is ½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)];
/// a split is kept only when gain > 0 and both children carry at least
/// `min_leaf_weight` hessian. Leaf value is −G/(H+λ). Empty input yields a
/// single zero leaf.
pub fn fit_tree(
    rows: &[EventFeatureRow],
    grads: &[f64],
    hesss: &[f64],
    config: &TreeConfig,
) -> Tree {
    assert_eq!(rows.len(), grads.len());
    assert_eq!(rows.len(), hesss.len());
    let n_features = rows.first().map_or(0, |r| r.values.len());
    let data = DataMatrix::from_rows(rows, n_features);
    let binned = BinnedMatrix::build(&data, MAX_BINS);
    let cols = subsample_columns(n_features, config.col_subsample, config.seed);
    let row_idx: Vec<u32> = (0..rows.len() as u32).collect();
    fit_tree_on(&data, &binned, row_idx, grads, hesss, &cols, config)
}

pub(crate) fn subsample_columns(n_features: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 || n_features == 0 {
        return (0..n_features).collect();
    }
    let k = ((n_features as f64 * fraction).round() as usize).clamp(1, n_features);
    let mut rng = stream_rng(seed, 0xc015);
    let mut cols = sample(&mut rng, n_features, k).into_vec();
    cols.sort_unstable();
    cols
}

/// Core fitting loop over pre-built matrices; `rows` are indices into
/// `data`, and `grads`/`hesss` are indexed by the same row ids.
pub(crate) fn fit_tree_on(
    data: &DataMatrix,
    binned: &BinnedMatrix,
    rows: Vec<u32>,
    grads: &[f64],
    hesss: &[f64],
    cols: &[usize],
    config: &TreeConfig,
) -> Tree {
    let mut nodes = Vec::new();
    build_node(&mut nodes, data, binned, rows, grads, hesss, cols, config, 0);
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn build_node(
    nodes: &mut Vec<TreeNode>,
    data: &DataMatrix,
    binned: &BinnedMatrix,
    rows: Vec<u32>,
    grads: &[f64],
    hesss: &[f64],
    cols: &[usize],
    config: &TreeConfig,
    depth: usize,
) -> u32 {
    let id = nodes.len() as u32;
    nodes.push(TreeNode::leaf(Vec::new(), 0.0));

    let mut g_sum = 0.0;
    let mut h_sum = 0.0;
    for &r in &rows {
        g_sum += grads[r as usize];
        h_sum += hesss[r as usize];
    }

    if depth < config.max_depth && rows.len() >= 2 {
        if let Some(split) = best_split(data, binned, &rows, grads, hesss, cols, config, g_sum, h_sum)
        {
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| {
                let ri = r as usize;
                data.is_missing(ri, split.feature) || data.value(ri, split.feature) < split.threshold
            });
            let left = build_node(nodes, data, binned, left_rows, grads, hesss, cols, config, depth + 1);
            let right = build_node(nodes, data, binned, right_rows, grads, hesss, cols, config, depth + 1);
            nodes[id as usize] = TreeNode {
                feature_index: split.feature as i32,
                threshold: split.threshold,
                left,
                right,
                cover: h_sum,
                values: Vec::new(),
            };
            return id;
        }
    }

    let mut value = -g_sum / (h_sum + config.lambda);
    if value == 0.0 {
        value = 0.0; // canonicalize -0.0
    }
    nodes[id as usize] = TreeNode::leaf(vec![value], h_sum);
    id
}

#[allow(clippy::too_many_arguments)]
fn best_split(
    data: &DataMatrix,
    binned: &BinnedMatrix,
    rows: &[u32],
    grads: &[f64],
    hesss: &[f64],
    cols: &[usize],
    config: &TreeConfig,
    g_sum: f64,
    h_sum: f64,
) -> Option<Split> {
    let lam = config.lambda;
    let parent_score = g_sum * g_sum / (h_sum + lam);
    let mut best: Option<Split> = None;

    // Features scanned in ascending index order, thresholds ascending, and
    // only strictly better gains accepted: ties resolve to the lowest
    // feature index and lowest threshold, independent of thread count.
    for &f in cols {
        let consider = |threshold: f64, g_left: f64, h_left: f64, best: &mut Option<Split>| {
            let g_right = g_sum - g_left;
            let h_right = h_sum - h_left;
            if h_left < config.min_leaf_weight || h_right < config.min_leaf_weight {
                return;
            }
            let gain = 0.5
                * (g_left * g_left / (h_left + lam) + g_right * g_right / (h_right + lam)
                    - parent_score);
            if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                *best = Some(Split { feature: f, threshold, gain });
            }
        };

        if rows.len() <= EXACT_SPLIT_MAX {
            let mut present: Vec<(f64, f64, f64)> = Vec::with_capacity(rows.len());
            let mut g_left = 0.0;
            let mut h_left = 0.0;
            for &r in rows {
                let ri = r as usize;
                match data.get(ri, f) {
                    Some(v) => present.push((v, grads[ri], hesss[ri])),
                    None => {
                        g_left += grads[ri];
                        h_left += hesss[ri];
                    }
                }
            }
            present.sort_by(|a, b| a.0.total_cmp(&b.0));
            for i in 0..present.len().saturating_sub(1) {
                g_left += present[i].1;
                h_left += present[i].2;
                let (v, v_next) = (present[i].0, present[i + 1].0);
                if v_next <= v {
                    continue;
                }
                let threshold = v + (v_next - v) / 2.0;
                if threshold <= v {
                    continue; // adjacent floats, nothing in between
                }
                consider(threshold, g_left, h_left, &mut best);
            }
        } else {
            let cuts = &binned.cuts[f];
            if cuts.is_empty() {
                continue;
            }
            let n_bins = cuts.len() + 1;
            let mut bin_g = vec![0.0; n_bins];
            let mut bin_h = vec![0.0; n_bins];
            let mut g_left = 0.0;
            let mut h_left = 0.0;
            for &r in rows {
                let ri = r as usize;
                let code = binned.code(ri, f);
                if code == MISSING_BIN {
                    g_left += grads[ri];
                    h_left += hesss[ri];
                } else {
                    bin_g[code as usize] += grads[ri];
                    bin_h[code as usize] += hesss[ri];
                }
            }
            for (b, cut) in cuts.iter().enumerate() {
                g_left += bin_g[b];
                h_left += bin_h[b];
                consider(*cut, g_left, h_left, &mut best);
            }
        }
    }
    best
}
