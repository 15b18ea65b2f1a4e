//! Pipeline configuration: one JSON file, strict about unknown keys, with
//! every field defaulted so an empty config (or none at all) runs the
//! whole synthetic pipeline. Flags override config keys; the config path
//! itself comes from `--config` or the `RAX_CONFIG` environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rax_core::imbalance::ImbalanceStrategy;
use rax_core::ingest::ColumnMapping;
use rax_core::models::{BoostingConfig, ForestConfig};
use rax_core::narrative::GatingConfig;
use rax_core::store::SplitSpec;
use rax_core::synth::SynthConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub columns: ColumnOverrides,
    pub model: ModelSpec,
    pub imbalance: ImbalanceStrategy,
    pub split: SplitSpec,
    pub gating: GatingConfig,
    pub narrative: NarrativeSpec,
    pub synth: SynthConfig,
    /// Strategies the `ablate` subcommand compares.
    pub ablation: Vec<ImbalanceStrategy>,
    /// Pipeline seed: trainer randomness and resampling.
    pub seed: u64,
    pub threads: Option<usize>,
    /// Expected feature-schema hash (16 hex digits); when set, every
    /// opened store must match it.
    pub schema_hash: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            columns: ColumnOverrides::default(),
            model: ModelSpec::default(),
            imbalance: ImbalanceStrategy::Baseline,
            split: SplitSpec::default(),
            gating: GatingConfig::default(),
            narrative: NarrativeSpec::default(),
            synth: SynthConfig::default(),
            ablation: Vec::new(),
            seed: 7,
            threads: None,
            schema_hash: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub crashes_csv: PathBuf,
    pub persons_csv: PathBuf,
    pub vehicles_csv: PathBuf,
    pub store_dir: PathBuf,
    pub model_file: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            crashes_csv: PathBuf::from("data/crashes.csv"),
            persons_csv: PathBuf::from("data/persons.csv"),
            vehicles_csv: PathBuf::from("data/vehicles.csv"),
            store_dir: PathBuf::from("store"),
            model_file: PathBuf::from("model.raxm"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

/// Per-table header overrides merged over the default column mappings:
/// semantic name -> CSV header.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnOverrides {
    pub crash: BTreeMap<String, String>,
    pub person: BTreeMap<String, String>,
    pub vehicle: BTreeMap<String, String>,
}

fn overlay(mut mapping: ColumnMapping, over: &BTreeMap<String, String>) -> ColumnMapping {
    for (semantic, header) in over {
        mapping.columns.insert(semantic.clone(), header.clone());
    }
    mapping
}

impl ColumnOverrides {
    pub fn crash_mapping(&self) -> ColumnMapping {
        overlay(ColumnMapping::crash_default(), &self.crash)
    }

    pub fn person_mapping(&self) -> ColumnMapping {
        overlay(ColumnMapping::person_default(), &self.person)
    }

    pub fn vehicle_mapping(&self) -> ColumnMapping {
        overlay(ColumnMapping::vehicle_default(), &self.vehicle)
    }
}

fn d_n_rounds() -> usize {
    BoostingConfig::default().n_rounds
}
fn d_boost_depth() -> usize {
    BoostingConfig::default().max_depth
}
fn d_learning_rate() -> f64 {
    BoostingConfig::default().learning_rate
}
fn d_row_subsample() -> f64 {
    BoostingConfig::default().row_subsample
}
fn d_col_subsample() -> f64 {
    BoostingConfig::default().col_subsample
}
fn d_lambda() -> f64 {
    BoostingConfig::default().lambda
}
fn d_min_leaf_weight() -> f64 {
    BoostingConfig::default().min_leaf_weight
}
fn d_n_trees() -> usize {
    ForestConfig::default().n_trees
}
fn d_forest_depth() -> usize {
    ForestConfig::default().max_depth
}
fn d_min_leaf() -> usize {
    ForestConfig::default().min_leaf
}
fn d_l2() -> f64 {
    1.0
}

/// Model family plus hyperparameters. Class weights and seeds are not
/// spelled here: they come from the imbalance strategy and the pipeline
/// seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Boosted {
        #[serde(default = "d_n_rounds")]
        n_rounds: usize,
        #[serde(default = "d_boost_depth")]
        max_depth: usize,
        #[serde(default = "d_learning_rate")]
        learning_rate: f64,
        #[serde(default = "d_row_subsample")]
        row_subsample: f64,
        #[serde(default = "d_col_subsample")]
        col_subsample: f64,
        #[serde(default = "d_lambda")]
        lambda: f64,
        #[serde(default = "d_min_leaf_weight")]
        min_leaf_weight: f64,
    },
    Forest {
        #[serde(default = "d_n_trees")]
        n_trees: usize,
        #[serde(default = "d_forest_depth")]
        max_depth: usize,
        #[serde(default = "d_min_leaf")]
        min_leaf: usize,
    },
    Logistic {
        #[serde(default = "d_l2")]
        l2: f64,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Boosted {
            n_rounds: d_n_rounds(),
            max_depth: d_boost_depth(),
            learning_rate: d_learning_rate(),
            row_subsample: d_row_subsample(),
            col_subsample: d_col_subsample(),
            lambda: d_lambda(),
            min_leaf_weight: d_min_leaf_weight(),
        }
    }
}

impl ModelSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Boosted { .. } => "boosted",
            ModelSpec::Forest { .. } => "forest",
            ModelSpec::Logistic { .. } => "logistic",
        }
    }

    /// Boosting hyperparameters: the spec's own when it is boosted,
    /// defaults otherwise (used by `ablate`, whose harness always boosts).
    pub fn boosting_config(&self, seed: u64) -> BoostingConfig {
        let mut cfg = BoostingConfig::default();
        cfg.seed = seed;
        if let ModelSpec::Boosted {
            n_rounds,
            max_depth,
            learning_rate,
            row_subsample,
            col_subsample,
            lambda,
            min_leaf_weight,
        } = *self
        {
            cfg.n_rounds = n_rounds;
            cfg.max_depth = max_depth;
            cfg.learning_rate = learning_rate;
            cfg.row_subsample = row_subsample;
            cfg.col_subsample = col_subsample;
            cfg.lambda = lambda;
            cfg.min_leaf_weight = min_leaf_weight;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Template,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NarrativeSpec {
    pub backend: BackendKind,
    /// Chat-completions endpoint; falls back to `RAX_NARRATIVE_URL`.
    pub base_url: Option<String>,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// How many top attributed features the narratives are checked against.
    pub top_k: usize,
}

impl Default for NarrativeSpec {
    fn default() -> Self {
        NarrativeSpec {
            backend: BackendKind::Template,
            base_url: None,
            model: "default".to_string(),
            timeout_secs: 30.0,
            max_retries: 2,
            max_in_flight: 4,
            top_k: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.split.validate().map_err(|e| CliError::usage(e.to_string()))?;
        self.gating.validate().map_err(|e| CliError::usage(e.to_string()))?;
        self.imbalance.validate().map_err(|e| CliError::usage(e.to_string()))?;
        self.synth.validate().map_err(|e| CliError::usage(e.to_string()))?;
        for strategy in &self.ablation {
            strategy.validate().map_err(|e| CliError::usage(e.to_string()))?;
        }
        if let Some(h) = &self.schema_hash {
            if h.len() != 16 || !h.chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(CliError::usage(format!(
                    "schema_hash {h:?} is not 16 hex digits"
                )));
            }
        }
        if self.narrative.top_k == 0 {
            return Err(CliError::usage("narrative.top_k must be >= 1"));
        }
        if !(self.narrative.timeout_secs > 0.0) {
            return Err(CliError::usage("narrative.timeout_secs must be positive"));
        }
        if self.threads == Some(0) {
            return Err(CliError::usage("threads must be >= 1"));
        }
        Ok(())
    }

    /// Default strategy set for `ablate` when the config lists none.
    pub fn ablation_strategies(&self) -> Vec<ImbalanceStrategy> {
        if !self.ablation.is_empty() {
            return self.ablation.clone();
        }
        vec![
            ImbalanceStrategy::Baseline,
            ImbalanceStrategy::Weighted,
            ImbalanceStrategy::Oversample { target_fatal_share: 0.1 },
            ImbalanceStrategy::Smote { k_neighbors: 5, target_fatal_share: 0.1 },
            ImbalanceStrategy::Focal { gamma: 2.0 },
        ]
    }
}

/// Loads the config from `--config`, else `$RAX_CONFIG`, else defaults.
pub fn load_config(flag: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let path = match flag {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os("RAX_CONFIG").map(PathBuf::from),
    };
    let config = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::usage(format!("invalid config {}: {e}", p.display()))
            })?
        }
    };
    Ok(config)
}

/// Hash of the resolved (flag-merged) config; recorded in the run
/// manifest so reruns can prove they used identical settings.
pub fn config_hash(config: &PipelineConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    format!("{:08x}", crc32fast::hash(canonical.as_bytes()))
}
