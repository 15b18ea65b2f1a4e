//! `rax` — crash-severity pipeline driver.
//!
//! Ten subcommands cover the pipeline end to end: ingest raw CSVs into the
//! feature store, split chronologically, train a model, evaluate it,
//! explain it (feature ranking and gated narratives), align narratives
//! against attributions, run the imbalance ablation, generate synthetic
//! data, and batch-score. Settings resolve as flags > config file
//! (`--config` or `$RAX_CONFIG`) > defaults. Exit codes: 0 success,
//! 1 usage/config error, 2 data error, 3 narrative-backend error, with a
//! one-line JSON error object on stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, BackendKind, PipelineConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "rax",
    version,
    about = "Crash-severity pipeline: feature store, tree ensembles, SHAP, narratives"
)]
struct Cli {
    /// Pipeline config JSON; falls back to $RAX_CONFIG, then to defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct StoreArgs {
    /// Feature-store directory (overrides config paths.store_dir).
    #[arg(long, value_name = "DIR")]
    store_dir: Option<PathBuf>,

    /// Report output directory (overrides config paths.report_dir).
    #[arg(long, value_name = "DIR")]
    report_dir: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Trained-model file (overrides config paths.model_file).
    #[arg(long, value_name = "PATH")]
    model_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the feature store from crash, person, and vehicle CSVs.
    Ingest {
        #[command(flatten)]
        store: StoreArgs,
        /// Crash-table CSV (overrides config paths.crashes_csv).
        #[arg(long, value_name = "PATH")]
        crashes: Option<PathBuf>,
        /// Person-table CSV (overrides config paths.persons_csv).
        #[arg(long, value_name = "PATH")]
        persons: Option<PathBuf>,
        /// Vehicle-table CSV (overrides config paths.vehicles_csv).
        #[arg(long, value_name = "PATH")]
        vehicles: Option<PathBuf>,
    },
    /// Materialize chronological train/test row-id lists.
    Split {
        #[command(flatten)]
        store: StoreArgs,
        /// Newest rows reserved for testing (overrides config split.n_test).
        #[arg(long, value_name = "N")]
        n_test: Option<u64>,
        /// Rows preceding the test window (overrides config split.n_train).
        #[arg(long, value_name = "N")]
        n_train: Option<u64>,
    },
    /// Fit the configured model on the training window and save it.
    Train {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Trainer seed (overrides config seed).
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
    },
    /// Score the test window and write metrics JSON.
    Evaluate {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Rank features by mean absolute SHAP over test events.
    Shap {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Explain at most this many events.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
        /// Rank for one class index (0 no-injury, 1 injury, 2 fatal)
        /// instead of the cross-class mean.
        #[arg(long, value_name = "CLASS")]
        class: Option<usize>,
    },
    /// Gate high-risk test events and generate narratives for them.
    Explain {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Narrative backend: template or http (overrides config).
        #[arg(long, value_name = "KIND")]
        backend: Option<String>,
        /// Chat-completions base URL for the http backend.
        #[arg(long, value_name = "URL")]
        backend_url: Option<String>,
        /// Gating threshold in [0,1] (overrides config gating.threshold).
        #[arg(long, value_name = "TAU")]
        threshold: Option<f64>,
        /// Consider at most this many test events before gating.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
    },
    /// Score narrative/attribution agreement from a narratives file.
    Align {
        #[command(flatten)]
        store: StoreArgs,
        /// Narratives JSON-lines file (default: report_dir/narratives.jsonl).
        #[arg(long, value_name = "PATH")]
        narratives: Option<PathBuf>,
        /// Top-k cutoff for recall (overrides config narrative.top_k).
        #[arg(long, value_name = "K")]
        k: Option<usize>,
    },
    /// Compare imbalance strategies on synthetic data.
    Ablate {
        #[command(flatten)]
        store: StoreArgs,
        /// Synthetic-data seed (overrides config synth.rng_seed).
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Synthetic event count (overrides config synth.n_events).
        #[arg(long, value_name = "N")]
        n_events: Option<usize>,
    },
    /// Generate a seeded synthetic event store.
    Synth {
        #[command(flatten)]
        store: StoreArgs,
        /// Synthetic-data seed (overrides config synth.rng_seed).
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Synthetic event count (overrides config synth.n_events).
        #[arg(long, value_name = "N")]
        n_events: Option<usize>,
    },
    /// Batch-score stored rows and report throughput.
    Score {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Score at most this many rows.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Shap { .. } => "shap",
            Command::Explain { .. } => "explain",
            Command::Align { .. } => "align",
            Command::Ablate { .. } => "ablate",
            Command::Synth { .. } => "synth",
            Command::Score { .. } => "score",
        }
    }

    fn store_args(&self) -> &StoreArgs {
        match self {
            Command::Ingest { store, .. }
            | Command::Split { store, .. }
            | Command::Train { store, .. }
            | Command::Evaluate { store, .. }
            | Command::Shap { store, .. }
            | Command::Explain { store, .. }
            | Command::Align { store, .. }
            | Command::Ablate { store, .. }
            | Command::Synth { store, .. }
            | Command::Score { store, .. } => store,
        }
    }

    fn model_args(&self) -> Option<&ModelArgs> {
        match self {
            Command::Train { model, .. }
            | Command::Evaluate { model, .. }
            | Command::Shap { model, .. }
            | Command::Explain { model, .. }
            | Command::Score { model, .. } => Some(model),
            _ => None,
        }
    }

    /// Folds this command's flags into the config (flags win).
    fn apply_overrides(&self, config: &mut PipelineConfig) -> Result<(), CliError> {
        let store = self.store_args();
        if let Some(dir) = &store.store_dir {
            config.paths.store_dir = dir.clone();
        }
        if let Some(dir) = &store.report_dir {
            config.paths.report_dir = dir.clone();
        }
        if let Some(model) = self.model_args() {
            if let Some(path) = &model.model_file {
                config.paths.model_file = path.clone();
            }
        }
        match self {
            Command::Ingest { crashes, persons, vehicles, .. } => {
                if let Some(p) = crashes {
                    config.paths.crashes_csv = p.clone();
                }
                if let Some(p) = persons {
                    config.paths.persons_csv = p.clone();
                }
                if let Some(p) = vehicles {
                    config.paths.vehicles_csv = p.clone();
                }
            }
            Command::Split { n_test, n_train, .. } => {
                if let Some(n) = n_test {
                    config.split.n_test = *n;
                }
                if let Some(n) = n_train {
                    config.split.n_train = *n;
                }
            }
            Command::Train { seed, .. } => {
                if let Some(s) = seed {
                    config.seed = *s;
                }
            }
            Command::Explain { backend, threshold, .. } => {
                if let Some(kind) = backend {
                    config.narrative.backend = match kind.as_str() {
                        "template" => BackendKind::Template,
                        "http" => BackendKind::Http,
                        other => {
                            return Err(CliError::usage(format!(
                                "--backend must be template or http, got {other:?}"
                            )))
                        }
                    };
                }
                if let Some(t) = threshold {
                    config.gating.threshold = *t;
                }
            }
            Command::Ablate { seed, n_events, .. } | Command::Synth { seed, n_events, .. } => {
                if let Some(s) = seed {
                    config.synth.rng_seed = *s;
                }
                if let Some(n) = n_events {
                    config.synth.n_events = *n;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = load_config(cli.config.as_deref())?;
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    cli.command.apply_overrides(&mut config)?;
    config.validate()?;
    init_threads(config.threads)?;
    let config_hash = config::config_hash(&config);

    let schema_hash = match &cli.command {
        Command::Ingest { .. } => commands::run_ingest(&config)?,
        Command::Split { .. } => commands::run_split(&config)?,
        Command::Train { .. } => commands::run_train(&config)?,
        Command::Evaluate { .. } => commands::run_evaluate(&config)?,
        Command::Shap { limit, class, .. } => commands::run_shap(&config, *limit, *class)?,
        Command::Explain { backend_url, limit, .. } => {
            commands::run_explain(&config, backend_url.as_deref(), *limit)?
        }
        Command::Align { narratives, k, .. } => {
            commands::run_align(&config, narratives.as_deref(), *k)?
        }
        Command::Ablate { .. } => commands::run_ablate(&config)?,
        Command::Synth { .. } => commands::run_synth(&config)?,
        Command::Score { limit, .. } => commands::run_score(&config, *limit)?,
    };

    commands::write_manifest(
        &config,
        cli.command.name(),
        &config_hash,
        &schema_hash,
        config.threads,
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; only real parse failures are
            // usage errors.
            if e.use_stderr() {
                let err = CliError::usage(e.to_string());
                eprintln!("{}", err.to_json());
                return ExitCode::from(1);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
