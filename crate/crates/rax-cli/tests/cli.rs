//! End-to-end tests of the `rax` binary: exit codes, error JSON on
//! stderr, pipeline outputs, idempotent reruns, and the HTTP narrative
//! backend against a scripted local server.

use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::Output;

fn rax(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_rax"));
    cmd.args(args).current_dir(dir);
    cmd.env_remove("RAX_CONFIG");
    cmd.env_remove("RAX_NARRATIVE_URL");
    cmd.env_remove("RAX_NARRATIVE_MODEL");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn rax")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Failure contract: the right exit code plus one parseable JSON error
/// object on stderr with matching kind/code.
fn assert_error(out: &Output, code: i32, kind: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|e| panic!("bad error JSON {line:?}: {e}"));
    assert_eq!(v["error"]["kind"], kind, "{stderr}");
    assert_eq!(v["error"]["code"], code, "{stderr}");
}

fn write_config(dir: &Path, value: &serde_json::Value) {
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn small_pipeline_config() -> serde_json::Value {
    serde_json::json!({
        "model": {"kind": "boosted", "n_rounds": 12, "max_depth": 3},
        "imbalance": {"name": "weighted"},
        "split": {"n_test": 200, "n_train": 1000},
        "synth": {"n_events": 1200, "rng_seed": 11},
        "seed": 5
    })
}

#[test]
fn help_covers_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let top = rax(dir.path(), &["--help"], &[]);
    assert_ok(&top);
    let text = String::from_utf8_lossy(&top.stdout).to_string();
    let subcommands = [
        "ingest", "split", "train", "evaluate", "shap", "explain", "align", "ablate", "synth",
        "score",
    ];
    for sub in subcommands {
        assert!(text.contains(sub), "top-level help missing {sub}:\n{text}");
        let sub_help = rax(dir.path(), &[sub, "--help"], &[]);
        assert_ok(&sub_help);
        let sub_text = String::from_utf8_lossy(&sub_help.stdout).to_string();
        assert!(sub_text.contains("--config"), "{sub} help missing --config");
        assert!(sub_text.contains("--threads"), "{sub} help missing --threads");
    }
}

#[test]
fn pipeline_runs_end_to_end_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &small_pipeline_config());
    let cfg = ["--config", "config.json"];

    assert_ok(&rax(dir.path(), &[&["synth"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["split"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["train"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["evaluate"], &cfg[..]].concat(), &[]));

    let reports = dir.path().join("reports");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("metrics.json")).unwrap()).unwrap();
    for field in ["accuracy", "kappa", "macro_f1", "per_class_recall", "confusion"] {
        assert!(metrics.get(field).is_some(), "metrics.json missing {field}");
    }
    let ids: Vec<i64> =
        serde_json::from_str(&fs::read_to_string(reports.join("test_ids.json")).unwrap()).unwrap();
    assert_eq!(ids.len(), 200);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert_eq!(manifest["seeds"]["pipeline"], 5);
    assert_eq!(manifest["seeds"]["synth"], 11);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 8);
    assert_eq!(manifest["schema_hash"].as_str().unwrap().len(), 16);
    assert!(manifest["component_versions"]["rax-core"].is_string());

    // SHAP ranking over a slice of the test window.
    assert_ok(&rax(dir.path(), &[&["shap", "--limit", "40"], &cfg[..]].concat(), &[]));
    let ranking = fs::read_to_string(reports.join("shap_ranking.csv")).unwrap();
    assert!(ranking.starts_with("feature,mean_abs_shap\n"));
    assert_eq!(ranking.lines().count(), 1 + 36);

    // Scoring writes predictions for every stored row plus throughput.
    assert_ok(&rax(dir.path(), &[&["score"], &cfg[..]].concat(), &[]));
    let predictions = fs::read_to_string(reports.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 1 + 1200);
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("score_stats.json")).unwrap())
            .unwrap();
    assert!(stats["rows_per_second"].as_f64().unwrap() > 0.0);

    // Rerunning with identical inputs rewrites identical bytes.
    let before_metrics = fs::read(reports.join("metrics.json")).unwrap();
    let before_ranking = fs::read(reports.join("shap_ranking.csv")).unwrap();
    assert_ok(&rax(dir.path(), &[&["evaluate"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["shap", "--limit", "40"], &cfg[..]].concat(), &[]));
    assert_eq!(before_metrics, fs::read(reports.join("metrics.json")).unwrap());
    assert_eq!(before_ranking, fs::read(reports.join("shap_ranking.csv")).unwrap());
}

#[test]
fn template_explain_aligns_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg_json = small_pipeline_config();
    cfg_json["synth"]["n_events"] = serde_json::json!(900);
    cfg_json["split"] = serde_json::json!({"n_test": 150, "n_train": 700});
    cfg_json["model"] = serde_json::json!({"kind": "boosted", "n_rounds": 8, "max_depth": 3});
    // Zero threshold gates every event with nonzero fatal probability.
    cfg_json["gating"] = serde_json::json!({"threshold": 0.0, "gated_mass": "fatal_only"});
    write_config(dir.path(), &cfg_json);
    let cfg = ["--config", "config.json"];

    assert_ok(&rax(dir.path(), &[&["synth"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["train"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["explain", "--limit", "10"], &cfg[..]].concat(), &[]));

    let reports = dir.path().join("reports");
    let narratives = fs::read_to_string(reports.join("narratives.jsonl")).unwrap();
    assert_eq!(narratives.lines().count(), 10);
    for line in narratives.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["backend_id"], "template");
        assert_eq!(v["shap_top"].as_array().unwrap().len(), 3);
        assert!(v["predicted_class"].is_string());
        assert!(v["error"].is_null());
    }

    assert_ok(&rax(dir.path(), &[&["align"], &cfg[..]].concat(), &[]));
    let alignment: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("alignment.json")).unwrap())
            .unwrap();
    assert_eq!(alignment["alignment_score"], 1.0);
    assert_eq!(alignment["aligned_fraction"], 1.0);
    assert_eq!(alignment["events"].as_array().unwrap().len(), 10);
}

fn serve_chat_completions(n: usize, content: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock");
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for _ in 0..n {
            let Ok((mut stream, _)) = listener.accept() else { return };
            consume_request(&mut stream);
            let body = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": content}}],
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n\
                 Content-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    format!("http://{addr}")
}

fn consume_request(stream: &mut TcpStream) {
    let mut buf = Vec::new();
    let mut tmp = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut tmp).unwrap_or(0);
        if n == 0 {
            return;
        }
        buf.extend_from_slice(&tmp[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
    let content_length = headers
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        let n = stream.read(&mut tmp).unwrap_or(0);
        if n == 0 {
            return;
        }
        buf.extend_from_slice(&tmp[..n]);
    }
}

#[test]
fn http_explain_round_trips_and_unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg_json = small_pipeline_config();
    cfg_json["synth"]["n_events"] = serde_json::json!(600);
    cfg_json["split"] = serde_json::json!({"n_test": 100, "n_train": 450});
    cfg_json["model"] = serde_json::json!({"kind": "boosted", "n_rounds": 6, "max_depth": 2});
    cfg_json["gating"] = serde_json::json!({"threshold": 0.0, "gated_mass": "fatal_only"});
    cfg_json["narrative"] = serde_json::json!({
        "backend": "http",
        "model": "mock-model",
        "timeout_secs": 5.0,
        "max_retries": 0,
    });
    write_config(dir.path(), &cfg_json);
    let cfg = ["--config", "config.json"];

    assert_ok(&rax(dir.path(), &[&["synth"], &cfg[..]].concat(), &[]));
    assert_ok(&rax(dir.path(), &[&["train"], &cfg[..]].concat(), &[]));

    // Reachable mock: labels parsed out of the response text.
    let base_url = serve_chat_completions(
        4,
        "Severity: Fatal. Ejection at night.\nPolicy: Deploy speed cameras.",
    );
    let out = rax(
        dir.path(),
        &[&["explain", "--limit", "4", "--backend-url", &base_url], &cfg[..]].concat(),
        &[],
    );
    assert_ok(&out);
    let narratives =
        fs::read_to_string(dir.path().join("reports").join("narratives.jsonl")).unwrap();
    assert_eq!(narratives.lines().count(), 4);
    for line in narratives.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["predicted_class"], "Fatal");
        assert_eq!(v["backend_id"], "http:mock-model");
        assert_eq!(v["policy_suggestion"], "Deploy speed cameras.");
    }

    // Unreachable port: transport failure after retries, exit 3.
    let dead_port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dead_url = format!("http://127.0.0.1:{dead_port}");
    let out = rax(
        dir.path(),
        &[&["explain", "--limit", "2", "--backend-url", &dead_url], &cfg[..]].concat(),
        &[],
    );
    assert_error(&out, 3, "backend");

    // The URL can also arrive via the environment.
    let out = rax(
        dir.path(),
        &[&["explain", "--limit", "2"], &cfg[..]].concat(),
        &[("RAX_NARRATIVE_URL", dead_url.as_str())],
    );
    assert_error(&out, 3, "backend");
}

#[test]
fn config_and_usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown key is rejected up front.
    write_config(
        dir.path(),
        &serde_json::json!({"seed": 1, "not_a_real_key": true}),
    );
    let out = rax(dir.path(), &["synth", "--config", "config.json"], &[]);
    assert_error(&out, 1, "usage");

    // Missing config file.
    let out = rax(dir.path(), &["synth", "--config", "nope.json"], &[]);
    assert_error(&out, 1, "usage");

    // Unknown flag value.
    let out = rax(dir.path(), &["explain", "--backend", "carrier-pigeon"], &[]);
    assert_error(&out, 1, "usage");

    // Unknown flag entirely (clap parse error).
    let out = rax(dir.path(), &["synth", "--frobnicate"], &[]);
    assert_error(&out, 1, "usage");

    // Invalid class index.
    let out = rax(dir.path(), &["shap", "--class", "7"], &[]);
    assert_error(&out, 1, "usage");

    // Store-dependent command without a store.
    let out = rax(dir.path(), &["split"], &[]);
    assert_error(&out, 1, "usage");

    // RAX_CONFIG is honored when --config is absent.
    write_config(dir.path(), &serde_json::json!({"bogus": 1}));
    let out = rax(dir.path(), &["synth"], &[("RAX_CONFIG", "config.json")]);
    assert_error(&out, 1, "usage");
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg_json = small_pipeline_config();
    cfg_json["synth"]["n_events"] = serde_json::json!(400);
    cfg_json["split"] = serde_json::json!({"n_test": 60, "n_train": 300});
    cfg_json["model"] = serde_json::json!({"kind": "boosted", "n_rounds": 4, "max_depth": 2});
    write_config(dir.path(), &cfg_json);
    let cfg = ["--config", "config.json"];
    assert_ok(&rax(dir.path(), &[&["synth"], &cfg[..]].concat(), &[]));

    // Configured schema hash disagreeing with the store.
    cfg_json["schema_hash"] = serde_json::json!("0000000000000000");
    write_config(dir.path(), &cfg_json);
    let out = rax(dir.path(), &[&["train"], &cfg[..]].concat(), &[]);
    assert_error(&out, 2, "data");

    // Evaluate without a trained model file.
    cfg_json["schema_hash"] = serde_json::Value::Null;
    write_config(dir.path(), &cfg_json);
    let out = rax(dir.path(), &[&["evaluate"], &cfg[..]].concat(), &[]);
    assert_error(&out, 2, "data");

    // Align without narratives.
    let out = rax(dir.path(), &[&["align"], &cfg[..]].concat(), &[]);
    assert_error(&out, 2, "data");
}

#[test]
fn ingest_builds_a_store_from_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();

    let mut crashes = String::from(
        "collision_id,timestamp,borough,zip_code,latitude,longitude,injured_count,killed_count,\
         contributing_factor_1,contributing_factor_2\n",
    );
    for i in 0..10 {
        let month = if i < 5 { 3 } else { 4 };
        crashes.push_str(&format!(
            "{},2024-0{}-{:02} 0{}:30:00,BROOKLYN,11201,40.65,-73.95,{},0,Unsafe Speed,\n",
            100 + i,
            month,
            (i % 27) + 1,
            i % 10,
            i % 3,
        ));
    }
    fs::write(data.join("crashes.csv"), crashes).unwrap();

    let mut persons = String::from(
        "collision_id,role,age,sex,injury_status,safety_equipment,ejected,airbag_deployed\n",
    );
    for i in 0..10 {
        persons.push_str(&format!(
            "{},Driver,{},M,Not Injured,Lap Belt,Not Ejected,Not Deployed\n",
            100 + i,
            25 + i,
        ));
    }
    fs::write(data.join("persons.csv"), persons).unwrap();

    let mut vehicles = String::from("collision_id,category,registration_state,model_year\n");
    for i in 0..10 {
        vehicles.push_str(&format!("{},Sedan,NY,2018\n", 100 + i));
    }
    fs::write(data.join("vehicles.csv"), vehicles).unwrap();

    assert_ok(&rax(dir.path(), &["ingest"], &[]));
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("reports").join("ingest_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["join"]["events_out"], 10);
    assert_eq!(report["partitions"], 2);
    assert_eq!(report["rows_stored"], 10);

    let out = rax(dir.path(), &["split", "--n-test", "3", "--n-train", "6"], &[]);
    assert_ok(&out);
    let ids: Vec<i64> = serde_json::from_str(
        &fs::read_to_string(dir.path().join("reports").join("test_ids.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(ids.len(), 3);

    // Missing input file is a config error.
    let out = rax(dir.path(), &["ingest", "--crashes", "data/absent.csv"], &[]);
    assert_error(&out, 1, "usage");
}

#[test]
fn ablate_writes_strategy_table() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &serde_json::json!({
            "model": {"kind": "boosted", "n_rounds": 6, "max_depth": 2},
            "synth": {"n_events": 600, "rng_seed": 3},
            "ablation": [{"name": "baseline"}, {"name": "weighted"}],
            "seed": 2
        }),
    );
    let out = rax(dir.path(), &["ablate", "--config", "config.json"], &[]);
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("reports").join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,accuracy,macro_f1,recall_fatal");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("Baseline,"));
    assert!(lines[2].starts_with("Weighted,"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("strategy,accuracy"), "{stdout}");
}
