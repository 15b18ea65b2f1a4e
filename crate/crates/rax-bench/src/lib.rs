//! Shared fixtures for the criterion benches: synthetic event rows and
//! pre-trained ensembles, sized so bench setup stays in the seconds range.

use rax_core::imbalance::{class_counts, compute_class_weights};
use rax_core::models::{
    fit_gradient_boosting, fit_random_forest, BoostingConfig, ForestConfig, Model, ObjectiveKind,
};
use rax_core::schema::{canonical_schema, EventFeatureRow, SeverityLabel};
use rax_core::synth::{generate, SynthConfig};

pub fn synth_rows(n_events: usize, seed: u64) -> Vec<EventFeatureRow> {
    let config = SynthConfig { n_events, rng_seed: seed, ..SynthConfig::default() };
    generate(&config).expect("synthetic generation")
}

pub fn boosted_model(rows: &[EventFeatureRow], n_rounds: usize, max_depth: usize) -> Model {
    let schema = canonical_schema();
    let labels: Vec<SeverityLabel> = rows.iter().map(|r| r.label).collect();
    let class_weights = compute_class_weights(class_counts(rows)).expect("all classes present");
    let config = BoostingConfig {
        n_rounds,
        max_depth,
        class_weights,
        seed: 902,
        ..BoostingConfig::default()
    };
    Model::Boosted(fit_gradient_boosting(
        rows,
        &labels,
        ObjectiveKind::WeightedSoftmax,
        &config,
        &schema,
    ))
}

pub fn forest_model(rows: &[EventFeatureRow], n_trees: usize, max_depth: usize) -> Model {
    let schema = canonical_schema();
    let labels: Vec<SeverityLabel> = rows.iter().map(|r| r.label).collect();
    let class_weights = compute_class_weights(class_counts(rows)).expect("all classes present");
    let config = ForestConfig { n_trees, max_depth, min_leaf: 20, class_weights, seed: 903 };
    Model::Forest(fit_random_forest(rows, &labels, &config, &schema))
}
