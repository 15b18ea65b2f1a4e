//! Tree ensembles and the linear baseline: a from-scratch decision-tree
//! learner shared by random forest and second-order gradient boosting,
//! plus multinomial logistic regression and high-throughput batch scoring.

pub mod boosting;
pub(crate) mod flat;
pub mod forest;
pub mod linear;
pub mod objective;
pub mod serialize;
pub mod tree;

pub use boosting::{fit_gradient_boosting, BoostedModel, BoostingConfig};
pub use forest::{fit_random_forest, ForestConfig, ForestModel};
pub use linear::{fit_logistic, LinearModel};
pub use objective::{focal_objective, weighted_softmax_objective, ObjectiveKind};
pub use serialize::{load_model, save_model};
pub use tree::{fit_tree, Tree, TreeConfig, TreeNode};

use crate::schema::{EventFeatureRow, FeatureSchema, SeverityLabel, N_CLASSES};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schema mismatch: model expects schema {model:016x}, rows carry schema {data:016x}")]
    SchemaMismatch { model: u64, data: u64 },
    #[error("training data is degenerate: {0}")]
    DegenerateInput(String),
}

/// Column-major-free flat view of a row batch used at fit time.
pub struct DataMatrix {
    pub n_rows: usize,
    pub n_features: usize,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl DataMatrix {
    pub fn from_rows(rows: &[EventFeatureRow], n_features: usize) -> DataMatrix {
        let n_rows = rows.len();
        let mut values = Vec::with_capacity(n_rows * n_features);
        let mut missing = Vec::with_capacity(n_rows * n_features);
        for r in rows {
            values.extend_from_slice(&r.values);
            // Non-finite values are never splittable; treat them as missing.
            for (j, &v) in r.values.iter().enumerate() {
                missing.push(r.missing[j] || !v.is_finite());
            }
        }
        DataMatrix { n_rows, n_features, values, missing }
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features + feature]
    }

    #[inline]
    pub fn is_missing(&self, row: usize, feature: usize) -> bool {
        self.missing[row * self.n_features + feature]
    }

    /// Value and missing-mask slices for one row.
    #[inline]
    pub fn row(&self, r: usize) -> (&[f64], &[bool]) {
        let s = r * self.n_features;
        (&self.values[s..s + self.n_features], &self.missing[s..s + self.n_features])
    }

    /// Present value or None.
    #[inline]
    pub fn get(&self, row: usize, feature: usize) -> Option<f64> {
        if self.is_missing(row, feature) {
            None
        } else {
            Some(self.value(row, feature))
        }
    }
}

/// Numerically stable softmax over the three class margins, renormalized
/// so the result sums to 1 up to the last ulp.
pub fn softmax(margins: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let m = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; N_CLASSES];
    let mut sum = 0.0;
    for c in 0..N_CLASSES {
        out[c] = (margins[c] - m).exp();
        sum += out[c];
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_class(proba: &[f64; N_CLASSES]) -> SeverityLabel {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if proba[c] > proba[best] {
            best = c;
        }
    }
    SeverityLabel::from_index(best).unwrap()
}

/// A trained severity model of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Forest(ForestModel),
    Boosted(BoostedModel),
    Linear(LinearModel),
}

impl Model {
    pub fn schema_hash(&self) -> u64 {
        match self {
            Model::Forest(m) => m.schema_hash,
            Model::Boosted(m) => m.schema_hash,
            Model::Linear(m) => m.schema_hash,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Forest(_) => "forest",
            Model::Boosted(_) => "boosted",
            Model::Linear(_) => "linear",
        }
    }

    pub fn predict_row(&self, values: &[f64], missing: &[bool]) -> [f64; N_CLASSES] {
        match self {
            Model::Forest(m) => m.predict_row(values, missing),
            Model::Boosted(m) => m.predict_row(values, missing),
            Model::Linear(m) => m.predict_row(values, missing),
        }
    }

    fn check_schema(&self, schema: &FeatureSchema) -> Result<(), ModelError> {
        let data = schema.hash();
        let model = self.schema_hash();
        if model != data {
            return Err(ModelError::SchemaMismatch { model, data });
        }
        Ok(())
    }
}

/// Class-probability vectors for a row batch. Rows must carry the schema
/// the model was trained on. Tree ensembles go through the blocked flat
/// scorer (bit-identical to `predict_row`, see `flat`); linear models are
/// cheap enough per row as-is.
pub fn predict_proba(
    model: &Model,
    schema: &FeatureSchema,
    rows: &[EventFeatureRow],
) -> Result<Vec<[f64; N_CLASSES]>, ModelError> {
    model.check_schema(schema)?;
    if let Some(flat) = flat::FlatEnsemble::build(model) {
        return Ok(flat.predict_proba(rows, schema.len()));
    }
    Ok(rows
        .par_iter()
        .map(|r| model.predict_row(&r.values, &r.missing))
        .collect())
}

pub fn predict_class(
    model: &Model,
    schema: &FeatureSchema,
    rows: &[EventFeatureRow],
) -> Result<Vec<SeverityLabel>, ModelError> {
    Ok(predict_proba(model, schema, rows)?
        .iter()
        .map(argmax_class)
        .collect())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScoreStats {
    pub rows: usize,
    pub seconds: f64,
    pub rows_per_second: f64,
}

/// Batch scoring with wall-clock throughput. Rows are processed in blocks
/// partitioned across worker threads; output order matches input order.
pub fn score_batch(
    model: &Model,
    schema: &FeatureSchema,
    rows: &[EventFeatureRow],
) -> Result<(Vec<SeverityLabel>, ScoreStats), ModelError> {
    model.check_schema(schema)?;
    let start = std::time::Instant::now();
    let labels: Vec<SeverityLabel> = if let Some(flat) = flat::FlatEnsemble::build(model) {
        flat.predict_proba(rows, schema.len()).iter().map(argmax_class).collect()
    } else {
        rows.par_iter()
            .map(|r| argmax_class(&model.predict_row(&r.values, &r.missing)))
            .collect()
    };
    let seconds = start.elapsed().as_secs_f64();
    let stats = ScoreStats {
        rows: rows.len(),
        seconds,
        rows_per_second: if seconds > 0.0 { rows.len() as f64 / seconds } else { f64::INFINITY },
    };
    Ok((labels, stats))
}
