//! Core library for the RaX crash-severity pipeline.
//!
//! The pipeline turns raw collision, person, and vehicle tables into a
//! unified per-event feature row, stores rows in a month-partitioned
//! columnar feature store, trains tree-ensemble and linear classifiers for
//! three-class injury severity, explains predictions with exact per-tree
//! Shapley attributions, and couples the tabular scores to a narrative
//! layer whose output is checked against the attributions.

pub mod imbalance;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod narrative;
pub mod rng;
pub mod schema;
pub mod shap;
pub mod store;
pub mod synth;

pub use schema::{canonical_schema, derive_label, EventFeatureRow, FeatureSchema, SeverityLabel};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
