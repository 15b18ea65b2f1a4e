//! Exact feature attribution for the tree models.
//!
//! `tree_shap` implements the polynomial-time path-dependent algorithm
//! (node covers act as conditional probabilities for features not yet
//! fixed along the path).  `brute_force_shap` computes the same quantity
//! by enumerating all feature subsets and is kept public as an
//! independent check.  `ensemble_shap` aggregates per-tree attributions
//! onto a model's output scale, and `global_importance` turns a batch of
//! attributions into a mean-|phi| feature ranking.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::models::{BoostedModel, ForestModel, Model, ModelError, Tree};
use crate::schema::{EventFeatureRow, FeatureSchema, N_CLASSES};

/// Subset enumeration is 2^d; refuse beyond this.
pub const BRUTE_FORCE_MAX_FEATURES: usize = 20;

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("tree has zero cover at the root; was it trained?")]
    ZeroRootCover,
    #[error("brute-force attribution enumerates 2^d subsets and needs d <= {max}; got {got}")]
    TooManyFeatures { got: usize, max: usize },
    #[error("attribution is defined for tree ensembles; {0} models are not supported")]
    UnsupportedModel(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Attribution of one tree's output(s): `phi[feature][output]` plus the
/// cover-weighted mean of the leaf values (the baseline the phis deviate
/// from).  Boosted trees have one output; forest trees have one per class.
#[derive(Debug, Clone)]
pub struct TreeShapValues {
    pub phi: Vec<Vec<f64>>,
    pub base: Vec<f64>,
}

/// Per-event attribution on the model's output scale: for each class,
/// `phi[class]` is a length-d vector and `base_values[class]` the
/// expected output, with sum(phi) + base equal to the model output.
#[derive(Debug, Clone, Serialize)]
pub struct ShapAttribution {
    pub collision_id: i64,
    pub phi: Vec<Vec<f64>>,
    pub base_values: Vec<f64>,
    /// "margin" (log-odds) for boosting, "probability" for forests.
    pub output_scale: &'static str,
}

/// Features ranked by mean absolute attribution, descending; ties break
/// alphabetically.
#[derive(Debug, Clone)]
pub struct GlobalImportance {
    pub entries: Vec<(String, f64)>,
}

impl GlobalImportance {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,mean_abs_shap\n");
        for (name, value) in &self.entries {
            out.push_str(&format!("{name},{value}\n"));
        }
        out
    }
}

/// Cover-weighted mean of the leaf values: the expected tree output when
/// no feature is known.
pub fn expected_value(tree: &Tree) -> Result<Vec<f64>, ShapError> {
    let root_cover = tree.nodes[0].cover;
    if !(root_cover > 0.0) {
        return Err(ShapError::ZeroRootCover);
    }
    let n_out = leaf_width(tree);
    let mut acc = vec![0.0; n_out];
    for node in &tree.nodes {
        if node.is_leaf() {
            for (a, v) in acc.iter_mut().zip(&node.values) {
                *a += node.cover * v;
            }
        }
    }
    for a in &mut acc {
        *a /= root_cover;
    }
    Ok(acc)
}

fn leaf_width(tree: &Tree) -> usize {
    tree.nodes
        .iter()
        .find(|n| n.is_leaf())
        .map(|n| n.values.len())
        .unwrap_or(0)
}

/// One feature's entry on the current root-to-node path.
///
/// `zero_fraction` is the share of marginal flow that still reaches the
/// node if this feature is excluded from the coalition (a product of
/// cover ratios); `one_fraction` is 1 while x follows the path's branch
/// for this feature and 0 once it does not.  `pweight` carries the
/// permutation weight mass for each possible coalition size.
#[derive(Clone, Copy, Default)]
struct PathItem {
    feature: i32,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

/// Appends a feature to the path, folding it into the stored coalition
/// weights. `len` is the element count before the append; the region
/// starts at `off`.
fn extend_path(path: &mut [PathItem], off: usize, len: usize, zero: f64, one: f64, feature: i32) {
    path[off + len] = PathItem {
        feature,
        zero_fraction: zero,
        one_fraction: one,
        pweight: if len == 0 { 1.0 } else { 0.0 },
    };
    let denom = (len + 1) as f64;
    for i in (0..len).rev() {
        path[off + i + 1].pweight += one * path[off + i].pweight * (i + 1) as f64 / denom;
        path[off + i].pweight = zero * path[off + i].pweight * (len - i) as f64 / denom;
    }
}

/// Removes element `index`, restoring the weights extend_path would have
/// produced without it. `last` is the index of the current last element.
fn unwind_path(path: &mut [PathItem], off: usize, last: usize, index: usize) {
    let one = path[off + index].one_fraction;
    let zero = path[off + index].zero_fraction;
    let denom = (last + 1) as f64;
    let mut next = path[off + last].pweight;
    if one != 0.0 {
        for j in (0..last).rev() {
            let tmp = path[off + j].pweight;
            path[off + j].pweight = next * denom / ((j + 1) as f64 * one);
            next = tmp - path[off + j].pweight * zero * (last - j) as f64 / denom;
        }
    } else {
        for j in (0..last).rev() {
            path[off + j].pweight = path[off + j].pweight * denom / (zero * (last - j) as f64);
        }
    }
    for j in index..last {
        path[off + j].feature = path[off + j + 1].feature;
        path[off + j].zero_fraction = path[off + j + 1].zero_fraction;
        path[off + j].one_fraction = path[off + j + 1].one_fraction;
    }
}

/// Total weight the path would carry with element `index` removed,
/// without mutating anything.
fn unwound_path_sum(path: &[PathItem], off: usize, last: usize, index: usize) -> f64 {
    let one = path[off + index].one_fraction;
    let zero = path[off + index].zero_fraction;
    let denom = (last + 1) as f64;
    let mut total = 0.0;
    if one != 0.0 {
        let mut next = path[off + last].pweight;
        for j in (0..last).rev() {
            let tmp = next * denom / ((j + 1) as f64 * one);
            total += tmp;
            next = path[off + j].pweight - tmp * zero * (last - j) as f64 / denom;
        }
    } else if zero != 0.0 {
        for j in (0..last).rev() {
            total += path[off + j].pweight * denom / (zero * (last - j) as f64);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn shap_recurse(
    tree: &Tree,
    values: &[f64],
    missing: &[bool],
    phi: &mut [f64],
    n_out: usize,
    path: &mut Vec<PathItem>,
    node_index: usize,
    depth: usize,
    parent_off: usize,
    parent_zero: f64,
    parent_one: f64,
    parent_feature: i32,
) {
    // Copy the parent's path so sibling recursions stay independent.
    let off = parent_off + depth;
    if path.len() < off + depth + 1 {
        path.resize(off + depth + 1, PathItem::default());
    }
    path.copy_within(parent_off..parent_off + depth, off);
    extend_path(path, off, depth, parent_zero, parent_one, parent_feature);
    let mut last = depth; // index of the last path element

    let node = &tree.nodes[node_index];
    if node.is_leaf() {
        for i in 1..=last {
            let item = path[off + i];
            if item.one_fraction == 0.0 && item.zero_fraction == 0.0 {
                continue;
            }
            let w = unwound_path_sum(path, off, last, i);
            let scale = w * (item.one_fraction - item.zero_fraction);
            let base = item.feature as usize * n_out;
            for (k, v) in node.values.iter().enumerate() {
                phi[base + k] += scale * v;
            }
        }
        return;
    }

    let f = node.feature_index as usize;
    let (hot, cold) = if missing[f] || values[f] < node.threshold {
        (node.left as usize, node.right as usize)
    } else {
        (node.right as usize, node.left as usize)
    };
    let hot_zero = tree.nodes[hot].cover / node.cover;
    let cold_zero = tree.nodes[cold].cover / node.cover;

    // A feature already on the path is undone first so its two splits
    // merge into a single coalition entry.
    let mut incoming_zero = 1.0;
    let mut incoming_one = 1.0;
    if let Some(i) = (0..=last).find(|&i| path[off + i].feature == node.feature_index) {
        incoming_zero = path[off + i].zero_fraction;
        incoming_one = path[off + i].one_fraction;
        unwind_path(path, off, last, i);
        last -= 1;
    }

    shap_recurse(
        tree,
        values,
        missing,
        phi,
        n_out,
        path,
        hot,
        last + 1,
        off,
        hot_zero * incoming_zero,
        incoming_one,
        node.feature_index,
    );
    shap_recurse(
        tree,
        values,
        missing,
        phi,
        n_out,
        path,
        cold,
        last + 1,
        off,
        cold_zero * incoming_zero,
        0.0,
        node.feature_index,
    );
}

/// Exact path-dependent attribution of a single tree's output(s) at one
/// input.  Requires consistent covers (parent = left + right); the base
/// is the cover-weighted mean of the leaf values, and for every output
/// sum(phi[..][k]) + base[k] equals the routed leaf value.
pub fn tree_shap(
    tree: &Tree,
    values: &[f64],
    missing: &[bool],
    n_features: usize,
) -> Result<TreeShapValues, ShapError> {
    let base = expected_value(tree)?;
    let n_out = base.len();
    let mut flat = vec![0.0; n_features * n_out];
    if tree.nodes.len() > 1 {
        let mut path = Vec::new();
        shap_recurse(
            tree, values, missing, &mut flat, n_out, &mut path, 0, 0, 0, 1.0, 1.0, -1,
        );
    }
    let phi = flat.chunks(n_out).map(|c| c.to_vec()).collect();
    Ok(TreeShapValues { phi, base })
}

/// The expected tree output when the features in `mask` are fixed to x
/// and the rest are marginalized by splitting flow across children in
/// proportion to cover.
fn masked_expectation(
    tree: &Tree,
    values: &[f64],
    missing: &[bool],
    mask: u32,
    node_index: usize,
    flow: f64,
    out: &mut [f64],
) {
    let node = &tree.nodes[node_index];
    if node.is_leaf() {
        for (o, v) in out.iter_mut().zip(&node.values) {
            *o += flow * v;
        }
        return;
    }
    let f = node.feature_index as usize;
    if mask >> f & 1 == 1 {
        let next = if missing[f] || values[f] < node.threshold {
            node.left as usize
        } else {
            node.right as usize
        };
        masked_expectation(tree, values, missing, mask, next, flow, out);
    } else {
        let left = node.left as usize;
        let right = node.right as usize;
        let lw = tree.nodes[left].cover / node.cover;
        let rw = tree.nodes[right].cover / node.cover;
        masked_expectation(tree, values, missing, mask, left, flow * lw, out);
        masked_expectation(tree, values, missing, mask, right, flow * rw, out);
    }
}

/// Shapley values by direct subset enumeration: for every S not
/// containing j, phi[j] accumulates w(|S|, d) * (v(S + j) - v(S)) where
/// v is the cover-marginalized tree expectation and
/// w(s, d) = s! (d-1-s)! / d! = 1 / (d * C(d-1, s)).
///
/// Exponential in d; kept as an independent check on `tree_shap`.
pub fn brute_force_shap(
    tree: &Tree,
    values: &[f64],
    missing: &[bool],
    n_features: usize,
) -> Result<TreeShapValues, ShapError> {
    if n_features > BRUTE_FORCE_MAX_FEATURES {
        return Err(ShapError::TooManyFeatures {
            got: n_features,
            max: BRUTE_FORCE_MAX_FEATURES,
        });
    }
    let base = expected_value(tree)?;
    let n_out = base.len();
    let d = n_features;

    // v(S) for every subset, flat at mask * n_out.
    let n_masks = 1usize << d;
    let mut v = vec![0.0; n_masks * n_out];
    for mask in 0..n_masks {
        masked_expectation(
            tree,
            values,
            missing,
            mask as u32,
            0,
            1.0,
            &mut v[mask * n_out..(mask + 1) * n_out],
        );
    }

    // w(s, d) via the multiplicative binomial recurrence.
    let mut weights = vec![0.0; d];
    let mut binom = 1.0; // C(d-1, 0)
    for (s, w) in weights.iter_mut().enumerate() {
        *w = 1.0 / (d as f64 * binom);
        binom = binom * (d - 1 - s) as f64 / (s + 1) as f64;
    }

    let mut phi = vec![vec![0.0; n_out]; d];
    for mask in 0..n_masks {
        let s = (mask as u32).count_ones() as usize;
        for j in 0..d {
            if mask >> j & 1 == 1 {
                continue;
            }
            let with = mask | 1 << j;
            let w = weights[s];
            for k in 0..n_out {
                phi[j][k] += w * (v[with * n_out + k] - v[mask * n_out + k]);
            }
        }
    }
    Ok(TreeShapValues { phi, base })
}

/// Attribution of a full model at one event, on the model's output
/// scale: boosting sums learning-rate-scaled per-tree attributions onto
/// the class margins; forests average per-tree attributions onto the
/// class probabilities.
pub fn ensemble_shap(
    model: &Model,
    row: &EventFeatureRow,
    schema: &FeatureSchema,
) -> Result<ShapAttribution, ShapError> {
    match model {
        Model::Boosted(m) => boosted_shap(m, row, schema),
        Model::Forest(m) => forest_shap(m, row, schema),
        Model::Linear(_) => Err(ShapError::UnsupportedModel("linear")),
    }
}

fn check_schema(model_hash: u64, schema: &FeatureSchema) -> Result<(), ShapError> {
    if model_hash != schema.hash() {
        return Err(ShapError::Model(ModelError::SchemaMismatch {
            model: model_hash,
            data: schema.hash(),
        }));
    }
    Ok(())
}

fn boosted_shap(
    model: &BoostedModel,
    row: &EventFeatureRow,
    schema: &FeatureSchema,
) -> Result<ShapAttribution, ShapError> {
    check_schema(model.schema_hash, schema)?;
    let d = model.n_features;
    let eta = model.learning_rate;
    let mut phi = vec![vec![0.0; d]; N_CLASSES];
    let mut base_values: Vec<f64> = model.base_score.to_vec();
    for round in &model.rounds {
        for (c, tree) in round.iter().enumerate() {
            let t = tree_shap(tree, &row.values, &row.missing, d)?;
            for j in 0..d {
                phi[c][j] += eta * t.phi[j][0];
            }
            base_values[c] += eta * t.base[0];
        }
    }
    Ok(ShapAttribution {
        collision_id: row.collision_id,
        phi,
        base_values,
        output_scale: "margin",
    })
}

fn forest_shap(
    model: &ForestModel,
    row: &EventFeatureRow,
    schema: &FeatureSchema,
) -> Result<ShapAttribution, ShapError> {
    check_schema(model.schema_hash, schema)?;
    let d = model.n_features;
    let mut phi = vec![vec![0.0; d]; N_CLASSES];
    let mut base_values = vec![0.0; N_CLASSES];
    for tree in &model.trees {
        let t = tree_shap(tree, &row.values, &row.missing, d)?;
        for j in 0..d {
            for c in 0..N_CLASSES {
                phi[c][j] += t.phi[j][c];
            }
        }
        for c in 0..N_CLASSES {
            base_values[c] += t.base[c];
        }
    }
    let scale = 1.0 / model.trees.len().max(1) as f64;
    for row_phi in &mut phi {
        for v in row_phi.iter_mut() {
            *v *= scale;
        }
    }
    for b in &mut base_values {
        *b *= scale;
    }
    Ok(ShapAttribution {
        collision_id: row.collision_id,
        phi,
        base_values,
        output_scale: "probability",
    })
}

/// Attributions for a batch of events, parallel across events, in input
/// order.
pub fn batch_shap(
    model: &Model,
    rows: &[EventFeatureRow],
    schema: &FeatureSchema,
) -> Result<Vec<ShapAttribution>, ShapError> {
    rows.par_iter()
        .map(|row| ensemble_shap(model, row, schema))
        .collect()
}

/// Mean |phi| per feature over a batch of attributions, ranked
/// descending (ties alphabetical).  `class` picks one class's
/// attributions; None averages across classes unweighted.
pub fn global_importance(
    attributions: &[ShapAttribution],
    schema: &FeatureSchema,
    class: Option<usize>,
) -> GlobalImportance {
    let d = schema.len();
    let mut sums = vec![0.0; d];
    for attr in attributions {
        for (j, sum) in sums.iter_mut().enumerate() {
            match class {
                Some(c) => *sum += attr.phi[c][j].abs(),
                None => {
                    let k = attr.phi.len() as f64;
                    *sum += attr.phi.iter().map(|p| p[j].abs()).sum::<f64>() / k;
                }
            }
        }
    }
    let n = attributions.len().max(1) as f64;
    let mut entries: Vec<(String, f64)> = sums
        .into_iter()
        .enumerate()
        .map(|(j, s)| (schema.name(j).to_string(), s / n))
        .collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("mean |phi| is finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    GlobalImportance { entries }
}
