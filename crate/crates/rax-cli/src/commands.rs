//! Subcommand implementations. Each command reads the resolved config,
//! does its one pipeline step, writes its outputs under the report
//! directory (or the store/model paths), and returns the schema hash it
//! operated under for the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use rax_core::imbalance::{
    class_counts, compute_class_weights, random_oversample, smote, AugmentationReport,
    ImbalanceStrategy,
};
use rax_core::ingest::{join_events, parse_table, ParsedTable};
use rax_core::metrics::evaluate;
use rax_core::models::{
    argmax_class, fit_gradient_boosting, fit_logistic, fit_random_forest, load_model, predict_class,
    predict_proba, save_model, score_batch, Model, ObjectiveKind,
};
use rax_core::narrative::{
    alignment_report, augment_with_probs, build_prompt, gate, generate_batch, AlignmentCase,
    Backend, GenerationLimits, HttpBackend, Lexicon, NarrativeRequest, TemplateBackend,
};
use rax_core::rng::derive_seed;
use rax_core::schema::{canonical_schema, EventFeatureRow, SeverityLabel, N_CLASSES};
use rax_core::shap::{batch_shap, global_importance};
use rax_core::store::{FeatureStore, PartitionKey};
use rax_core::synth::{generate as synth_generate, run_ablation};

use crate::config::{BackendKind, ModelSpec, PipelineConfig};
use crate::error::CliError;

fn ensure_report_dir(config: &PipelineConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.paths.report_dir).map_err(|e| {
        CliError::data(format!(
            "cannot create report dir {}: {e}",
            config.paths.report_dir.display()
        ))
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn check_input_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Opens the store and enforces the configured schema hash, if any.
fn open_store(config: &PipelineConfig) -> Result<FeatureStore, CliError> {
    if !config.paths.store_dir.is_dir() {
        return Err(CliError::usage(format!(
            "store dir {} does not exist (run `ingest` or `synth` first)",
            config.paths.store_dir.display()
        )));
    }
    let store = FeatureStore::open(&config.paths.store_dir)?;
    if let Some(expected) = &config.schema_hash {
        let actual = store.schema().hash_hex();
        if actual != *expected {
            return Err(CliError::data(format!(
                "store schema hash {actual} does not match configured schema_hash {expected}"
            )));
        }
    }
    Ok(store)
}

fn write_store(
    store_dir: &Path,
    rows: &[EventFeatureRow],
) -> Result<(FeatureStore, usize), CliError> {
    let schema = canonical_schema();
    let mut store = FeatureStore::recreate(store_dir, &schema)?;
    let mut by_month: BTreeMap<PartitionKey, Vec<EventFeatureRow>> = BTreeMap::new();
    for row in rows {
        by_month.entry(PartitionKey::of(row.timestamp)).or_default().push(row.clone());
    }
    let n_partitions = by_month.len();
    for (key, partition_rows) in &by_month {
        store.write_partition(*key, partition_rows)?;
    }
    Ok((store, n_partitions))
}

fn shares(counts: [u64; N_CLASSES]) -> [f64; N_CLASSES] {
    let total: u64 = counts.iter().sum();
    let mut out = [0.0; N_CLASSES];
    if total > 0 {
        for c in 0..N_CLASSES {
            out[c] = counts[c] as f64 / total as f64;
        }
    }
    out
}

// ---- ingest ----

#[derive(Serialize)]
struct IngestSummary {
    crashes: rax_core::ingest::IngestReport,
    persons: rax_core::ingest::IngestReport,
    vehicles: rax_core::ingest::IngestReport,
    join: rax_core::ingest::JoinReport,
    partitions: usize,
    rows_stored: u64,
    schema_hash: String,
}

pub fn run_ingest(config: &PipelineConfig) -> Result<String, CliError> {
    check_input_file(&config.paths.crashes_csv, "crashes_csv")?;
    check_input_file(&config.paths.persons_csv, "persons_csv")?;
    check_input_file(&config.paths.vehicles_csv, "vehicles_csv")?;
    ensure_report_dir(config)?;

    let (crash_table, crash_report) =
        parse_table(&config.paths.crashes_csv, &config.columns.crash_mapping())?;
    let (person_table, person_report) =
        parse_table(&config.paths.persons_csv, &config.columns.person_mapping())?;
    let (vehicle_table, vehicle_report) =
        parse_table(&config.paths.vehicles_csv, &config.columns.vehicle_mapping())?;
    let ParsedTable::Crashes(crashes) = crash_table else {
        return Err(CliError::data("crash mapping did not yield a crash table"));
    };
    let ParsedTable::Persons(persons) = person_table else {
        return Err(CliError::data("person mapping did not yield a person table"));
    };
    let ParsedTable::Vehicles(vehicles) = vehicle_table else {
        return Err(CliError::data("vehicle mapping did not yield a vehicle table"));
    };

    let (rows, join_report) = join_events(&crashes, &persons, &vehicles);
    let (store, partitions) = write_store(&config.paths.store_dir, &rows)?;

    let summary = IngestSummary {
        crashes: crash_report,
        persons: person_report,
        vehicles: vehicle_report,
        join: join_report,
        partitions,
        rows_stored: store.total_rows(),
        schema_hash: store.schema().hash_hex(),
    };
    write_json(&config.paths.report_dir.join("ingest_report.json"), &summary)?;
    println!(
        "ingested {} events into {} partition(s) at {}",
        summary.rows_stored,
        partitions,
        config.paths.store_dir.display()
    );
    Ok(store.schema().hash_hex())
}

// ---- split ----

#[derive(Serialize)]
struct SplitSummary {
    n_train: usize,
    n_test: usize,
    train_ids: Vec<i64>,
    test_ids: Vec<i64>,
}

pub fn run_split(config: &PipelineConfig) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let store = open_store(config)?;
    let (train, test) = store.temporal_split(&config.split)?;
    let train_ids: Vec<i64> = train.iter().map(|r| r.collision_id).collect();
    let test_ids: Vec<i64> = test.iter().map(|r| r.collision_id).collect();
    write_json(&config.paths.report_dir.join("train_ids.json"), &train_ids)?;
    write_json(&config.paths.report_dir.join("test_ids.json"), &test_ids)?;
    write_json(
        &config.paths.report_dir.join("split_report.json"),
        &SplitSummary { n_train: train.len(), n_test: test.len(), train_ids, test_ids },
    )?;
    println!("split {} train / {} test rows", train.len(), test.len());
    Ok(store.schema().hash_hex())
}

// ---- train ----

/// The training rows, weights, and objective implied by an imbalance
/// strategy. Resampling strategies rewrite the rows; Weighted rewrites
/// the class weights; Focal swaps the boosting objective.
struct TrainPlan {
    rows: Vec<EventFeatureRow>,
    class_weights: [f64; N_CLASSES],
    objective: ObjectiveKind,
    augmentation: Option<AugmentationReport>,
}

fn plan_training(
    train: Vec<EventFeatureRow>,
    strategy: &ImbalanceStrategy,
    model: &ModelSpec,
    seed: u64,
) -> Result<TrainPlan, CliError> {
    strategy.validate()?;
    if !matches!(model, ModelSpec::Boosted { .. })
        && matches!(strategy, ImbalanceStrategy::Focal { .. })
    {
        return Err(CliError::usage(
            "the focal_loss imbalance strategy requires a boosted model",
        ));
    }
    if matches!(model, ModelSpec::Logistic { .. })
        && matches!(strategy, ImbalanceStrategy::Weighted)
    {
        return Err(CliError::usage(
            "the logistic baseline does not take class weights; use baseline, \
             oversample, or smote",
        ));
    }
    let resample_seed = derive_seed(seed, 0xab1a);
    let mut plan = TrainPlan {
        rows: Vec::new(),
        class_weights: [1.0; N_CLASSES],
        objective: ObjectiveKind::WeightedSoftmax,
        augmentation: None,
    };
    plan.rows = match *strategy {
        ImbalanceStrategy::Baseline => train,
        ImbalanceStrategy::Weighted => {
            plan.class_weights = compute_class_weights(class_counts(&train))?;
            train
        }
        ImbalanceStrategy::Oversample { target_fatal_share } => {
            let (rows, report) = random_oversample(&train, target_fatal_share, resample_seed)?;
            plan.augmentation = Some(report);
            rows
        }
        ImbalanceStrategy::Smote { k_neighbors, target_fatal_share } => {
            let (rows, report) =
                smote(&train, k_neighbors, target_fatal_share, resample_seed, &canonical_schema())?;
            plan.augmentation = Some(report);
            rows
        }
        ImbalanceStrategy::Focal { gamma } => {
            plan.objective = ObjectiveKind::Focal { gamma };
            train
        }
    };
    Ok(plan)
}

fn fit_model(
    spec: &ModelSpec,
    plan: &TrainPlan,
    seed: u64,
) -> Result<Model, CliError> {
    if plan.rows.is_empty() {
        return Err(CliError::data("training set is empty"));
    }
    let schema = canonical_schema();
    let labels: Vec<SeverityLabel> = plan.rows.iter().map(|r| r.label).collect();
    let model = match *spec {
        ModelSpec::Boosted { .. } => {
            let mut cfg = spec.boosting_config(seed);
            cfg.class_weights = plan.class_weights;
            Model::Boosted(fit_gradient_boosting(
                &plan.rows,
                &labels,
                plan.objective,
                &cfg,
                &schema,
            ))
        }
        ModelSpec::Forest { n_trees, max_depth, min_leaf } => {
            let cfg = rax_core::models::ForestConfig {
                n_trees,
                max_depth,
                min_leaf,
                class_weights: plan.class_weights,
                seed,
            };
            Model::Forest(fit_random_forest(&plan.rows, &labels, &cfg, &schema))
        }
        ModelSpec::Logistic { l2 } => {
            Model::Linear(fit_logistic(&plan.rows, &labels, l2, &schema)?)
        }
    };
    Ok(model)
}

#[derive(Serialize)]
struct TrainSummary {
    model_kind: &'static str,
    strategy: &'static str,
    n_train_rows: usize,
    n_fit_rows: usize,
    class_counts: [u64; N_CLASSES],
    class_weights: [f64; N_CLASSES],
    augmentation: Option<AugmentationReport>,
    final_train_loss: Option<f64>,
    schema_hash: String,
    seed: u64,
}

pub fn run_train(config: &PipelineConfig) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let store = open_store(config)?;
    let (train, _test) = store.temporal_split(&config.split)?;
    let n_train_rows = train.len();
    let counts = class_counts(&train);
    let plan = plan_training(train, &config.imbalance, &config.model, config.seed)?;
    let model = fit_model(&config.model, &plan, config.seed)?;
    save_model(&config.paths.model_file, &model)?;

    let final_train_loss = match &model {
        Model::Boosted(b) => b.train_loss.last().copied(),
        _ => None,
    };
    let summary = TrainSummary {
        model_kind: config.model.kind_name(),
        strategy: config.imbalance.name(),
        n_train_rows,
        n_fit_rows: plan.rows.len(),
        class_counts: counts,
        class_weights: plan.class_weights,
        augmentation: plan.augmentation,
        final_train_loss,
        schema_hash: store.schema().hash_hex(),
        seed: config.seed,
    };
    write_json(&config.paths.report_dir.join("train_report.json"), &summary)?;
    println!(
        "trained {} model ({} strategy) on {} rows -> {}",
        summary.model_kind,
        summary.strategy,
        summary.n_fit_rows,
        config.paths.model_file.display()
    );
    Ok(store.schema().hash_hex())
}

// ---- evaluate ----

pub fn run_evaluate(config: &PipelineConfig) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let store = open_store(config)?;
    let (_train, test) = store.temporal_split(&config.split)?;
    let model = load_model(&config.paths.model_file)?;
    let y_true: Vec<SeverityLabel> = test.iter().map(|r| r.label).collect();
    let y_pred = predict_class(&model, store.schema(), &test)?;
    let metrics = evaluate(&y_true, &y_pred)?;
    write_json(&config.paths.report_dir.join("metrics.json"), &metrics)?;
    println!(
        "evaluated {} test rows: accuracy {:.4}, macro_f1 {:.4}, kappa {:.4}",
        metrics.n, metrics.accuracy, metrics.macro_f1, metrics.kappa
    );
    Ok(store.schema().hash_hex())
}

// ---- shap ----

pub fn run_shap(
    config: &PipelineConfig,
    limit: Option<usize>,
    class: Option<usize>,
) -> Result<String, CliError> {
    if let Some(c) = class {
        if c >= N_CLASSES {
            return Err(CliError::usage(format!("--class must be < {N_CLASSES}, got {c}")));
        }
    }
    ensure_report_dir(config)?;
    let store = open_store(config)?;
    let model = load_model(&config.paths.model_file)?;
    let (_train, mut rows) = store.temporal_split(&config.split)?;
    if let Some(n) = limit {
        rows.truncate(n);
    }
    if rows.is_empty() {
        return Err(CliError::data("no rows to explain"));
    }
    let attributions = batch_shap(&model, &rows, store.schema())?;
    let ranking = global_importance(&attributions, store.schema(), class);
    write_text(&config.paths.report_dir.join("shap_ranking.csv"), &ranking.to_csv())?;
    let top = ranking
        .entries
        .first()
        .map(|(name, v)| format!("{name} ({v:.4})"))
        .unwrap_or_default();
    println!("ranked {} features over {} events; top: {}", ranking.entries.len(), rows.len(), top);
    Ok(store.schema().hash_hex())
}

// ---- explain ----

/// One generated narrative plus everything `align` needs to score it.
#[derive(Serialize, Deserialize)]
pub struct NarrativeRecord {
    pub collision_id: i64,
    pub shap_top: Vec<String>,
    pub proba: [f64; N_CLASSES],
    pub predicted_class: Option<SeverityLabel>,
    pub explanation: String,
    pub policy_suggestion: String,
    pub latency_ms: f64,
    pub backend_id: String,
    pub error: Option<String>,
}

fn build_backend(config: &PipelineConfig, url_flag: Option<&str>) -> Result<Backend, CliError> {
    match config.narrative.backend {
        BackendKind::Template => Ok(Backend::Template(TemplateBackend)),
        BackendKind::Http => {
            let base_url = url_flag
                .map(str::to_string)
                .or_else(|| config.narrative.base_url.clone())
                .or_else(|| std::env::var("RAX_NARRATIVE_URL").ok())
                .ok_or_else(|| {
                    CliError::usage(
                        "http narrative backend needs a base URL (--backend-url, \
                         narrative.base_url, or RAX_NARRATIVE_URL)",
                    )
                })?;
            Ok(Backend::Http(HttpBackend::new(base_url, config.narrative.model.clone())))
        }
    }
}

#[derive(Serialize)]
struct ExplainSummary {
    rows_considered: usize,
    rows_gated: usize,
    narratives_written: usize,
    backend_id: String,
}

pub fn run_explain(
    config: &PipelineConfig,
    backend_url: Option<&str>,
    limit: Option<usize>,
) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let store = open_store(config)?;
    let model = load_model(&config.paths.model_file)?;
    let (_train, mut rows) = store.temporal_split(&config.split)?;
    if let Some(n) = limit {
        rows.truncate(n);
    }
    let schema = store.schema();
    let rows_considered = rows.len();
    let proba = predict_proba(&model, schema, &rows)?;

    let gated: Vec<(EventFeatureRow, [f64; N_CLASSES])> = rows
        .into_iter()
        .zip(proba)
        .filter(|(_, p)| gate(p, &config.gating))
        .collect();

    let lexicon = Lexicon::default();
    let backend = build_backend(config, backend_url)?;
    let limits = GenerationLimits {
        timeout: Duration::from_secs_f64(config.narrative.timeout_secs),
        max_retries: config.narrative.max_retries,
        max_in_flight: config.narrative.max_in_flight,
    };

    let gated_rows: Vec<EventFeatureRow> = gated.iter().map(|(r, _)| r.clone()).collect();
    let mut requests = Vec::with_capacity(gated.len());
    if !gated_rows.is_empty() {
        let attributions = batch_shap(&model, &gated_rows, schema)?;
        for ((row, p), att) in gated.iter().zip(&attributions) {
            let class_index = argmax_class(p).as_index();
            let mut order: Vec<usize> = (0..schema.len()).collect();
            order.sort_by(|&a, &b| {
                att.phi[class_index][b]
                    .abs()
                    .partial_cmp(&att.phi[class_index][a].abs())
                    .expect("attributions are finite")
                    .then_with(|| schema.name(a).cmp(schema.name(b)))
            });
            let shap_top: Vec<String> = order
                .iter()
                .take(config.narrative.top_k)
                .map(|&f| schema.name(f).to_string())
                .collect();
            let prompt = augment_with_probs(build_prompt(row), p)?;
            requests.push(NarrativeRequest {
                collision_id: row.collision_id,
                prompt,
                proba: *p,
                shap_top,
            });
        }
    }

    let results = generate_batch(&backend, &requests, &limits, &lexicon);
    let mut records = Vec::with_capacity(results.len());
    for (request, result) in requests.iter().zip(results) {
        let r = result?;
        records.push(NarrativeRecord {
            collision_id: r.collision_id,
            shap_top: request.shap_top.clone(),
            proba: request.proba,
            predicted_class: r.predicted_class,
            explanation: r.explanation,
            policy_suggestion: r.policy_suggestion,
            latency_ms: r.latency.as_secs_f64() * 1e3,
            backend_id: r.backend_id,
            error: r.error,
        });
    }

    let path = config.paths.report_dir.join("narratives.jsonl");
    let mut out = String::new();
    for record in &records {
        out.push_str(
            &serde_json::to_string(record)
                .map_err(|e| CliError::data(format!("cannot serialize narrative: {e}")))?,
        );
        out.push('\n');
    }
    write_text(&path, &out)?;
    let summary = ExplainSummary {
        rows_considered,
        rows_gated: gated.len(),
        narratives_written: records.len(),
        backend_id: match &backend {
            Backend::Template(_) => "template".to_string(),
            Backend::Http(h) => format!("http:{}", h.model),
        },
    };
    write_json(&config.paths.report_dir.join("explain_report.json"), &summary)?;
    println!(
        "generated {} narrative(s) for {} gated event(s) -> {}",
        records.len(),
        gated.len(),
        path.display()
    );
    Ok(store.schema().hash_hex())
}

// ---- align ----

pub fn run_align(
    config: &PipelineConfig,
    narratives: Option<&Path>,
    k: Option<usize>,
) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let default_path = config.paths.report_dir.join("narratives.jsonl");
    let path = narratives.unwrap_or(&default_path);
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read narratives {}: {e}", path.display())))?;
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: NarrativeRecord = serde_json::from_str(line).map_err(|e| {
            CliError::data(format!("bad narrative record on line {}: {e}", i + 1))
        })?;
        cases.push(AlignmentCase {
            collision_id: record.collision_id,
            shap_top: record.shap_top,
            narrative: record.explanation,
        });
    }
    let k = k.unwrap_or(config.narrative.top_k);
    if k == 0 {
        return Err(CliError::usage("--k must be >= 1"));
    }
    let report = alignment_report(&cases, &Lexicon::default(), k);
    write_json(&config.paths.report_dir.join("alignment.json"), &report)?;
    println!(
        "aligned {} narrative(s): recall {:.3}, precision {:.3}, score {:.3}, aligned {:.3}",
        report.events.len(),
        report.mean_recall,
        report.mean_precision,
        report.alignment_score,
        report.aligned_fraction
    );
    Ok(canonical_schema().hash_hex())
}

// ---- ablate ----

pub fn run_ablate(config: &PipelineConfig) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let schema = canonical_schema();
    let strategies = config.ablation_strategies();
    let trainer = config.model.boosting_config(config.seed);
    let table = run_ablation(&strategies, &config.synth, &trainer, &schema)?;
    write_text(&config.paths.report_dir.join("ablation.csv"), &table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(schema.hash_hex())
}

// ---- synth ----

#[derive(Serialize)]
struct SynthSummary {
    n_events: usize,
    rng_seed: u64,
    partitions: usize,
    class_counts: [u64; N_CLASSES],
    class_shares: [f64; N_CLASSES],
    schema_hash: String,
}

pub fn run_synth(config: &PipelineConfig) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let rows = synth_generate(&config.synth)?;
    let (store, partitions) = write_store(&config.paths.store_dir, &rows)?;
    let counts = class_counts(&rows);
    let summary = SynthSummary {
        n_events: rows.len(),
        rng_seed: config.synth.rng_seed,
        partitions,
        class_counts: counts,
        class_shares: shares(counts),
        schema_hash: store.schema().hash_hex(),
    };
    write_json(&config.paths.report_dir.join("synth_report.json"), &summary)?;
    println!(
        "generated {} synthetic events into {} partition(s) at {}",
        rows.len(),
        partitions,
        config.paths.store_dir.display()
    );
    Ok(store.schema().hash_hex())
}

// ---- score ----

pub fn run_score(config: &PipelineConfig, limit: Option<usize>) -> Result<String, CliError> {
    ensure_report_dir(config)?;
    let store = open_store(config)?;
    let model = load_model(&config.paths.model_file)?;
    let mut rows = store.all_rows()?;
    if let Some(n) = limit {
        rows.truncate(n);
    }
    if rows.is_empty() {
        return Err(CliError::data("store has no rows to score"));
    }
    let (labels, stats) = score_batch(&model, store.schema(), &rows)?;

    let path = config.paths.report_dir.join("predictions.csv");
    let mut csv = String::from("collision_id,predicted\n");
    for (row, label) in rows.iter().zip(&labels) {
        csv.push_str(&format!("{},{}\n", row.collision_id, label.name()));
    }
    write_text(&path, &csv)?;
    write_json(&config.paths.report_dir.join("score_stats.json"), &stats)?;
    let line = serde_json::to_string(&stats)
        .map_err(|e| CliError::data(format!("cannot serialize stats: {e}")))?;
    println!("{line}");
    Ok(store.schema().hash_hex())
}

// ---- run manifest ----

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    seeds: BTreeMap<&'static str, u64>,
    schema_hash: &'a str,
    component_versions: BTreeMap<&'static str, &'static str>,
    threads: Option<usize>,
    generated_at: String,
}

/// Records what this invocation ran with; written on success next to the
/// other reports. `generated_at` is informational and exempt from the
/// byte-identical-rerun rule.
pub fn write_manifest(
    config: &PipelineConfig,
    command: &str,
    config_hash: &str,
    schema_hash: &str,
    threads: Option<usize>,
) -> Result<(), CliError> {
    ensure_report_dir(config)?;
    let manifest = RunManifest {
        command,
        config_hash,
        seeds: BTreeMap::from([("pipeline", config.seed), ("synth", config.synth.rng_seed)]),
        schema_hash,
        component_versions: BTreeMap::from([
            ("rax-core", rax_core::VERSION),
            ("rax-cli", env!("CARGO_PKG_VERSION")),
        ]),
        threads,
        generated_at: chrono::Utc::now().to_rfc3339(),
    };
    write_json(&config.paths.report_dir.join("run_manifest.json"), &manifest)
}
