//! Cache-friendly batch scoring for tree ensembles.
//!
//! `predict_row` walks every tree for one row at a time; with hundreds of
//! trees the ensemble no longer fits in cache and each row pays a full
//! re-load. The flat scorer transposes the loop: rows are processed in
//! blocks, trees in the outer-inner position, so one tree's nodes stay in
//! L1 while a whole block routes through it. Nodes are re-encoded to a
//! compact 24-byte layout and missing values to NaN (routing left is
//! `!(v >= threshold)`, which NaN satisfies), halving the per-step loads.
//!
//! Accumulation order per class is identical to the per-row methods, so
//! flat results are bit-for-bit equal to `Model::predict_row`.

use super::{softmax, BoostedModel, ForestModel, Model};
use crate::schema::{EventFeatureRow, N_CLASSES};
use rayon::prelude::*;

/// Rows per block: value buffer (block × n_features × 8 bytes) should sit
/// comfortably in L2 while a tree's nodes stay in L1.
const BLOCK_ROWS: usize = 2048;

#[derive(Clone)]
pub(crate) struct FlatNode {
    threshold: f64,
    /// Split feature, or -1 for a leaf (whose payload offset is `left`).
    feature: i32,
    left: u32,
    right: u32,
}

pub(crate) struct FlatTree {
    nodes: Vec<FlatNode>,
    /// Concatenated leaf payloads, `outputs` values per leaf.
    leaf_values: Vec<f64>,
    outputs: usize,
}

impl FlatTree {
    fn build(tree: &super::Tree, outputs: usize) -> FlatTree {
        let mut nodes = Vec::with_capacity(tree.nodes.len());
        let mut leaf_values = Vec::new();
        for n in &tree.nodes {
            if n.is_leaf() {
                let offset = leaf_values.len() as u32;
                debug_assert_eq!(n.values.len(), outputs);
                leaf_values.extend_from_slice(&n.values);
                nodes.push(FlatNode { threshold: 0.0, feature: -1, left: offset, right: 0 });
            } else {
                nodes.push(FlatNode {
                    threshold: n.threshold,
                    feature: n.feature_index,
                    left: n.left,
                    right: n.right,
                });
            }
        }
        FlatTree { nodes, leaf_values, outputs }
    }

    /// Leaf payload for one row; `values` has missing entries as NaN.
    #[inline]
    fn leaf(&self, values: &[f64]) -> &[f64] {
        let mut i = 0usize;
        loop {
            let node = &self.nodes[i];
            if node.feature < 0 {
                let at = node.left as usize;
                return &self.leaf_values[at..at + self.outputs];
            }
            let v = values[node.feature as usize];
            i = if !(v >= node.threshold) { node.left as usize } else { node.right as usize };
        }
    }
}

pub(crate) enum FlatEnsemble {
    Boosted {
        /// Round-major, classes cycling fastest — the fitting order.
        trees: Vec<FlatTree>,
        base_score: [f64; N_CLASSES],
        learning_rate: f64,
    },
    Forest {
        trees: Vec<FlatTree>,
    },
}

impl FlatEnsemble {
    /// Falls back to `None` for models without tree structure.
    pub(crate) fn build(model: &Model) -> Option<FlatEnsemble> {
        match model {
            Model::Boosted(m) => Some(FlatEnsemble::from_boosted(m)),
            Model::Forest(m) => Some(FlatEnsemble::from_forest(m)),
            Model::Linear(_) => None,
        }
    }

    fn from_boosted(m: &BoostedModel) -> FlatEnsemble {
        let trees = m
            .rounds
            .iter()
            .flat_map(|round| round.iter().map(|t| FlatTree::build(t, 1)))
            .collect();
        FlatEnsemble::Boosted {
            trees,
            base_score: m.base_score,
            learning_rate: m.learning_rate,
        }
    }

    fn from_forest(m: &ForestModel) -> FlatEnsemble {
        FlatEnsemble::Forest {
            trees: m.trees.iter().map(|t| FlatTree::build(t, N_CLASSES)).collect(),
        }
    }

    /// Class probabilities for a row batch, in input order. Work is split
    /// into row blocks; blocks are distributed across the rayon pool.
    pub(crate) fn predict_proba(
        &self,
        rows: &[EventFeatureRow],
        n_features: usize,
    ) -> Vec<[f64; N_CLASSES]> {
        let mut out = vec![[0.0; N_CLASSES]; rows.len()];
        rows.par_chunks(BLOCK_ROWS)
            .zip(out.par_chunks_mut(BLOCK_ROWS))
            .for_each(|(block, proba)| self.score_block(block, n_features, proba));
        out
    }

    fn score_block(
        &self,
        block: &[EventFeatureRow],
        n_features: usize,
        proba: &mut [[f64; N_CLASSES]],
    ) {
        // Missing-as-NaN value matrix for the block, row-contiguous.
        let mut values = vec![f64::NAN; block.len() * n_features];
        for (row, dst) in block.iter().zip(values.chunks_mut(n_features)) {
            for f in 0..n_features {
                if !row.missing[f] {
                    dst[f] = row.values[f];
                }
            }
        }

        match self {
            FlatEnsemble::Boosted { trees, base_score, learning_rate } => {
                let mut margins = vec![*base_score; block.len()];
                for (t, tree) in trees.iter().enumerate() {
                    let class = t % N_CLASSES;
                    for (m, row) in margins.iter_mut().zip(values.chunks(n_features)) {
                        m[class] += learning_rate * tree.leaf(row)[0];
                    }
                }
                for (p, m) in proba.iter_mut().zip(&margins) {
                    *p = softmax(m);
                }
            }
            FlatEnsemble::Forest { trees } => {
                let acc = proba; // forests accumulate distributions in place
                for tree in trees {
                    for (a, row) in acc.iter_mut().zip(values.chunks(n_features)) {
                        let leaf = tree.leaf(row);
                        for c in 0..N_CLASSES {
                            a[c] += leaf[c];
                        }
                    }
                }
                for a in acc.iter_mut() {
                    let sum: f64 = a.iter().sum();
                    if sum > 0.0 {
                        for v in a.iter_mut() {
                            *v /= sum;
                        }
                    }
                }
            }
        }
    }
}
