//! Acceptance gate: one sequential check per shipped guarantee.
//!
//! Each criterion prints a single pass/fail line with its elapsed time
//! (run with `--nocapture` to watch them stream); the test fails at the
//! end if any criterion failed. Criteria run in order because the later
//! ones reuse fixtures built by the earlier ones: the full-size boosted
//! model from A3 feeds the A10 throughput measurement, and the 100k-row
//! synthetic corpus from A10 feeds the A11 store round-trip.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Output;
use std::time::Instant;

use rand::Rng;
use rax_core::imbalance::{class_counts, compute_class_weights, ImbalanceStrategy};
use rax_core::metrics::{evaluate, Evaluation};
use rax_core::models::objective::HESS_FLOOR;
use rax_core::models::{
    fit_gradient_boosting, fit_logistic, fit_random_forest, predict_class, score_batch,
    BoostingConfig, ForestConfig, Model, ObjectiveKind, Tree, TreeNode,
};
use rax_core::narrative::{align, alignment_score, parse_prediction, Lexicon};
use rax_core::rng::stream_rng;
use rax_core::schema::{canonical_schema, derive_label, EventFeatureRow, SeverityLabel};
use rax_core::shap::{brute_force_shap, ensemble_shap, tree_shap};
use rax_core::store::{split_rows, FeatureStore, PartitionKey, SplitSpec};
use rax_core::synth::{generate, run_ablation, SynthConfig};

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Gate {
        Gate { failures: Vec::new() }
    }

    /// Runs one criterion, prints its line, and records a failure if the
    /// body errored, panicked, or blew its time budget.
    fn criterion<F>(&mut self, id: &str, name: &str, budget_secs: f64, body: F)
    where
        F: FnOnce() -> Result<String, String>,
    {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panicked".to_string());
            Err(format!("panic: {msg}"))
        });
        let elapsed = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget_secs => {
                Err(format!("over budget ({elapsed:.1}s > {budget_secs:.0}s): {detail}"))
            }
            other => other,
        };
        let (status, detail) = match &outcome {
            Ok(detail) => ("pass", detail.clone()),
            Err(reason) => ("FAIL", reason.clone()),
        };
        println!("{id:<4} {name:.<34} {status}  {elapsed:>7.2}s  {detail}");
        if let Err(reason) = outcome {
            self.failures.push(format!("{id} {name}: {reason}"));
        }
    }

    fn finish(self) {
        assert!(
            self.failures.is_empty(),
            "{} acceptance criteria failed:\n{}",
            self.failures.len(),
            self.failures.join("\n")
        );
    }
}

// ---------------------------------------------------------------------
// Binary-spawning helpers (A9).

fn rax(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_rax"));
    cmd.args(args).current_dir(dir);
    cmd.env_remove("RAX_CONFIG");
    cmd.env_remove("RAX_NARRATIVE_URL");
    cmd.env_remove("RAX_NARRATIVE_MODEL");
    cmd.output().expect("spawn rax")
}

fn expect_ok(out: &Output, what: &str) -> Result<(), String> {
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{what} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Serves `n` chat-completion requests on an ephemeral port, each answered
/// with the same assistant message.
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

// ---------------------------------------------------------------------
// Random-tree generator (A4). Grows a tree top-down, leaf probability
// 1/4 per node (always at depth 0), split thresholds in (-1, 1), leaf
// payloads in (-2, 2), parent cover = sum of child covers.

fn random_tree(rng: &mut impl Rng, d: usize, depth: usize, n_out: usize) -> Tree {
    fn grow(
        rng: &mut impl Rng,
        nodes: &mut Vec<TreeNode>,
        d: usize,
        depth: usize,
        n_out: usize,
    ) -> (u32, f64) {
        if depth == 0 || rng.random_range(0..4) == 0 {
            let values = (0..n_out).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cover = rng.random_range(0.5..5.0);
            nodes.push(TreeNode {
                feature_index: -1,
                threshold: 0.0,
                left: 0,
                right: 0,
                cover,
                values,
            });
            return ((nodes.len() - 1) as u32, cover);
        }
        let idx = nodes.len();
        nodes.push(TreeNode {
            feature_index: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            cover: 0.0,
            values: Vec::new(),
        });
        let (left, lc) = grow(rng, nodes, d, depth - 1, n_out);
        let (right, rc) = grow(rng, nodes, d, depth - 1, n_out);
        nodes[idx] = TreeNode {
            feature_index: rng.random_range(0..d) as i32,
            threshold: rng.random_range(-1.0..1.0),
            left,
            right,
            cover: lc + rc,
            values: Vec::new(),
        };
        (idx as u32, lc + rc)
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, d, depth, n_out);
    Tree { nodes }
}

fn random_input(rng: &mut impl Rng, d: usize) -> (Vec<f64>, Vec<bool>) {
    let values = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let missing = (0..d).map(|_| rng.random_range(0..8) == 0).collect();
    (values, missing)
}

// ---------------------------------------------------------------------
// Independent metrics implementation (A7). Deliberately coded from the
// definitions, not by calling into the library: confusion cells are
// counted one (true, predicted) pair at a time, and every derived
// quantity is spelled out from the counts.

fn naive_evaluate(y_true: &[SeverityLabel], y_pred: &[SeverityLabel]) -> Evaluation {
    let mut counts = [[0u64; 3]; 3];
    for t in 0..3 {
        for p in 0..3 {
            counts[t][p] = y_true
                .iter()
                .zip(y_pred)
                .filter(|(a, b)| a.as_index() == t && b.as_index() == p)
                .count() as u64;
        }
    }
    let n = y_true.len() as f64;
    let accuracy = (counts[0][0] + counts[1][1] + counts[2][2]) as f64 / n;

    let row = |c: usize| counts[c][0] + counts[c][1] + counts[c][2];
    let col = |c: usize| counts[0][c] + counts[1][c] + counts[2][c];
    let p_e: f64 = (0..3).map(|c| (row(c) as f64 / n) * (col(c) as f64 / n)).sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        0.0
    } else {
        (accuracy - p_e) / (1.0 - p_e)
    };

    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    let mut f1 = [0.0; 3];
    for c in 0..3 {
        let tp = counts[c][c] as f64;
        precision[c] = if col(c) == 0 { 0.0 } else { tp / col(c) as f64 };
        recall[c] = if row(c) == 0 { 0.0 } else { tp / row(c) as f64 };
        let s = precision[c] + recall[c];
        f1[c] = if s == 0.0 { 0.0 } else { 2.0 * precision[c] * recall[c] / s };
    }
    let macro_f1 = (f1[0] + f1[1] + f1[2]) / 3.0;

    Evaluation {
        n: y_true.len() as u64,
        accuracy,
        kappa,
        macro_f1,
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
        confusion: rax_core::metrics::ConfusionMatrix { counts },
    }
}

fn random_labels(rng: &mut impl Rng, n: usize) -> Vec<SeverityLabel> {
    (0..n)
        .map(|_| SeverityLabel::from_index(rng.random_range(0..3)).unwrap())
        .collect()
}

// ---------------------------------------------------------------------

#[test]
fn acceptance() {
    let schema = canonical_schema();
    let mut gate = Gate::new();

    // Fixtures shared across criteria.
    let fitted: RefCell<Option<(Model, Vec<EventFeatureRow>, Vec<EventFeatureRow>)>> =
        RefCell::new(None);
    let corpus_100k: RefCell<Option<Vec<EventFeatureRow>>> = RefCell::new(None);

    gate.criterion("A1", "label-rule", 1.0, || {
        let mut checked = 0;
        for injured in 0u32..=5 {
            for killed in 0u32..=3 {
                let want = if killed >= 1 {
                    SeverityLabel::Fatal
                } else if injured >= 1 {
                    SeverityLabel::Injury
                } else {
                    SeverityLabel::NoInjury
                };
                let got = derive_label(injured, killed);
                if got != want {
                    return Err(format!("({injured},{killed}) -> {got:?}, want {want:?}"));
                }
                checked += 1;
            }
        }
        Ok(format!("{checked}/24 grid cells exact"))
    });

    gate.criterion("A2", "objective-gradients", 5.0, || {
        let mut rng = stream_rng(0xacce, 2);
        let gammas = [0.5, 1.0, 2.0, 3.0];
        let mut max_grad_rel = 0.0f64;
        let mut max_hess_rel = 0.0f64;
        for draw in 0..1000 {
            let margins = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let label = rng.random_range(0..3);
            let weights = [
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
            ];
            let kinds = [
                ObjectiveKind::WeightedSoftmax,
                ObjectiveKind::Focal { gamma: gammas[draw % gammas.len()] },
            ];
            for kind in kinds {
                let (grad, hess) = kind.grad_hess(&margins, label, &weights);
                let base = kind.loss(&margins, label, &weights);
                for c in 0..3 {
                    let h = 1e-5;
                    let mut up = margins;
                    up[c] += h;
                    let mut dn = margins;
                    dn[c] -= h;
                    let fd_grad =
                        (kind.loss(&up, label, &weights) - kind.loss(&dn, label, &weights))
                            / (2.0 * h);
                    let tol = 1e-4 * fd_grad.abs().max(grad[c].abs()) + 1e-8;
                    if (grad[c] - fd_grad).abs() > tol {
                        return Err(format!(
                            "{kind:?} grad[{c}] {} vs fd {fd_grad} at {margins:?} label {label}",
                            grad[c]
                        ));
                    }
                    max_grad_rel = max_grad_rel
                        .max((grad[c] - fd_grad).abs() / fd_grad.abs().max(grad[c].abs()).max(1e-4));

                    let h2 = 1e-4;
                    let mut up = margins;
                    up[c] += h2;
                    let mut dn = margins;
                    dn[c] -= h2;
                    // The analytic hessian is floored, so the oracle is
                    // floored the same way before comparison.
                    let fd_hess = ((kind.loss(&up, label, &weights) - 2.0 * base
                        + kind.loss(&dn, label, &weights))
                        / (h2 * h2))
                        .max(HESS_FLOOR);
                    let tol = 1e-3 * fd_hess.abs().max(hess[c].abs()) + 1e-6;
                    if (hess[c] - fd_hess).abs() > tol {
                        return Err(format!(
                            "{kind:?} hess[{c}] {} vs fd {fd_hess} at {margins:?} label {label}",
                            hess[c]
                        ));
                    }
                    max_hess_rel = max_hess_rel
                        .max((hess[c] - fd_hess).abs() / fd_hess.abs().max(hess[c].abs()).max(1e-3));
                }
            }
        }
        // Zero focusing must reduce the focal loss to plain weighted
        // softmax, derivatives included.
        let focal0 = ObjectiveKind::Focal { gamma: 0.0 };
        let softmax = ObjectiveKind::WeightedSoftmax;
        for _ in 0..200 {
            let margins = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            let label = rng.random_range(0..3);
            let weights = [
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
                rng.random_range(0.1..10.0),
            ];
            let lf = focal0.loss(&margins, label, &weights);
            let ls = softmax.loss(&margins, label, &weights);
            if (lf - ls).abs() > 1e-12 {
                return Err(format!("gamma=0 loss {lf} vs softmax {ls}"));
            }
            let (gf, hf) = focal0.grad_hess(&margins, label, &weights);
            let (gs, hs) = softmax.grad_hess(&margins, label, &weights);
            for c in 0..3 {
                if (gf[c] - gs[c]).abs() > 1e-12 || (hf[c] - hs[c]).abs() > 1e-12 {
                    return Err(format!("gamma=0 derivatives diverge at class {c}"));
                }
            }
        }
        Ok(format!(
            "1000 fd draws x2 objectives (max rel err grad {max_grad_rel:.1e}, hess {max_hess_rel:.1e}); gamma=0 == softmax on 200 draws"
        ))
    });

    gate.criterion("A3", "boosting-monotone-loss", 120.0, || {
        let rows = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
        let (train, test) = split_rows(rows, &SplitSpec::default()).map_err(|e| e.to_string())?;
        let weights = compute_class_weights(class_counts(&train)).map_err(|e| e.to_string())?;
        let config = BoostingConfig { class_weights: weights, ..BoostingConfig::default() };
        let labels: Vec<SeverityLabel> = train.iter().map(|r| r.label).collect();
        let model =
            fit_gradient_boosting(&train, &labels, ObjectiveKind::WeightedSoftmax, &config, &schema);
        if model.train_loss.len() != config.n_rounds + 1 {
            return Err(format!("expected 401 loss entries, got {}", model.train_loss.len()));
        }
        for (round, w) in model.train_loss.windows(2).enumerate() {
            if w[1] > w[0] + 1e-9 {
                return Err(format!("loss rose at round {}: {} -> {}", round + 1, w[0], w[1]));
            }
        }
        let detail = format!(
            "400 rounds non-increasing on 20k/5k split; weighted loss {:.4} -> {:.4}",
            model.train_loss[0],
            model.train_loss.last().unwrap()
        );
        *fitted.borrow_mut() = Some((Model::Boosted(model), train, test));
        Ok(detail)
    });

    gate.criterion("A4", "treeshap-exactness", 60.0, || {
        let mut rng = stream_rng(0xacce, 4);
        let mut max_gap = 0.0f64;
        for _ in 0..200 {
            let d = rng.random_range(1..=10);
            let depth = rng.random_range(1..=4);
            let n_out = rng.random_range(1..=3);
            let tree = random_tree(&mut rng, d, depth, n_out);
            let (values, missing) = random_input(&mut rng, d);
            let fast = tree_shap(&tree, &values, &missing, d).map_err(|e| e.to_string())?;
            let slow = brute_force_shap(&tree, &values, &missing, d).map_err(|e| e.to_string())?;
            for j in 0..d {
                for k in 0..n_out {
                    let gap = (fast.phi[j][k] - slow.phi[j][k]).abs();
                    max_gap = max_gap.max(gap);
                    if gap > 1e-8 {
                        return Err(format!(
                            "phi[{j}][{k}] differs by {gap:.2e} on a depth-{depth} tree with {d} features"
                        ));
                    }
                }
            }
            for k in 0..n_out {
                let gap = (fast.base[k] - slow.base[k]).abs();
                max_gap = max_gap.max(gap);
                if gap > 1e-8 {
                    return Err(format!("base[{k}] differs by {gap:.2e}"));
                }
            }
        }

        // Local accuracy: attributions plus base must reproduce the
        // model output on its own scale (margins for boosting, mean
        // leaf distribution for forests).
        let borrow = fitted.borrow();
        let Some((_, train, test)) = borrow.as_ref() else {
            return Err("needs the fitted pipeline from A3".into());
        };
        let sub = &train[..4000];
        let sub_labels: Vec<SeverityLabel> = sub.iter().map(|r| r.label).collect();
        let boosted = fit_gradient_boosting(
            sub,
            &sub_labels,
            ObjectiveKind::WeightedSoftmax,
            &BoostingConfig { n_rounds: 50, max_depth: 4, ..BoostingConfig::default() },
            &schema,
        );
        let forest = fit_random_forest(
            sub,
            &sub_labels,
            &ForestConfig { n_trees: 40, max_depth: 6, min_leaf: 5, ..ForestConfig::default() },
            &schema,
        );
        let boosted_model = Model::Boosted(boosted.clone());
        let forest_model = Model::Forest(forest.clone());
        let mut max_local = 0.0f64;
        let mut attributions = 0;
        for row in &test[..2500] {
            let att = ensemble_shap(&boosted_model, row, &schema).map_err(|e| e.to_string())?;
            let margins = boosted.predict_margins(&row.values, &row.missing);
            for c in 0..3 {
                let reconstructed: f64 = att.phi[c].iter().sum::<f64>() + att.base_values[c];
                let gap = (reconstructed - margins[c]).abs();
                max_local = max_local.max(gap);
                if gap > 1e-6 {
                    return Err(format!(
                        "boosted margin[{c}] off by {gap:.2e} at event {}",
                        row.collision_id
                    ));
                }
            }
            attributions += 1;
        }
        for row in &test[2500..5000] {
            let att = ensemble_shap(&forest_model, row, &schema).map_err(|e| e.to_string())?;
            let mut mean_leaf = [0.0f64; 3];
            for tree in &forest.trees {
                let leaf = tree.leaf_values(&row.values, &row.missing);
                for c in 0..3 {
                    mean_leaf[c] += leaf[c];
                }
            }
            for c in 0..3 {
                mean_leaf[c] /= forest.trees.len() as f64;
                let reconstructed: f64 = att.phi[c].iter().sum::<f64>() + att.base_values[c];
                let gap = (reconstructed - mean_leaf[c]).abs();
                max_local = max_local.max(gap);
                if gap > 1e-6 {
                    return Err(format!(
                        "forest output[{c}] off by {gap:.2e} at event {}",
                        row.collision_id
                    ));
                }
            }
            attributions += 1;
        }
        Ok(format!(
            "200 trees vs brute force (max gap {max_gap:.1e}); local accuracy on {attributions} attributions (max gap {max_local:.1e})"
        ))
    });

    gate.criterion("A5", "imbalance-ablation-direction", 900.0, || {
        let strategies = [
            ImbalanceStrategy::Baseline,
            ImbalanceStrategy::Weighted,
            ImbalanceStrategy::Focal { gamma: 2.0 },
        ];
        let trainer =
            BoostingConfig { max_depth: 6, min_leaf_weight: 5.0, ..BoostingConfig::default() };
        let (mut weighted_leg, mut focal_leg, mut gap_leg) = (0, 0, 0);
        for seed in 1u64..=5 {
            let synth = SynthConfig { rng_seed: seed, ..SynthConfig::default() };
            let table =
                run_ablation(&strategies, &synth, &trainer, &schema).map_err(|e| e.to_string())?;
            let base = &table.rows[0];
            let weighted = &table.rows[1];
            let focal = &table.rows[2];
            if weighted.recall_fatal > base.recall_fatal {
                weighted_leg += 1;
            }
            if focal.recall_fatal > base.recall_fatal {
                focal_leg += 1;
            }
            if (weighted.accuracy - base.accuracy).abs() <= 0.03 {
                gap_leg += 1;
            }
        }
        if weighted_leg < 3 || focal_leg < 3 || gap_leg < 3 {
            return Err(format!(
                "majority vote failed: weighted>baseline {weighted_leg}/5, focal>baseline {focal_leg}/5, |acc gap|<=0.03 {gap_leg}/5"
            ));
        }
        Ok(format!(
            "fatal-recall lift over baseline: weighted {weighted_leg}/5, focal {focal_leg}/5; accuracy within 0.03: {gap_leg}/5"
        ))
    });

    gate.criterion("A6", "model-ordering", 900.0, || {
        let (mut boosted_leg, mut forest_leg) = (0, 0);
        let mut margins = Vec::new();
        for seed in 1u64..=5 {
            let synth = SynthConfig {
                rng_seed: seed,
                interaction_weight: 2.0,
                ..SynthConfig::default()
            };
            let rows = generate(&synth).map_err(|e| e.to_string())?;
            let (train, test) = split_rows(rows, &SplitSpec::default()).map_err(|e| e.to_string())?;
            let labels: Vec<SeverityLabel> = train.iter().map(|r| r.label).collect();
            let truth: Vec<SeverityLabel> = test.iter().map(|r| r.label).collect();
            let macro_f1 = |model: &Model| -> Result<f64, String> {
                let pred = predict_class(model, &schema, &test).map_err(|e| e.to_string())?;
                Ok(evaluate(&truth, &pred).map_err(|e| e.to_string())?.macro_f1)
            };
            let boosted = macro_f1(&Model::Boosted(fit_gradient_boosting(
                &train,
                &labels,
                ObjectiveKind::WeightedSoftmax,
                &BoostingConfig::default(),
                &schema,
            )))?;
            let forest = macro_f1(&Model::Forest(fit_random_forest(
                &train,
                &labels,
                &ForestConfig::default(),
                &schema,
            )))?;
            let logistic = macro_f1(&Model::Linear(
                fit_logistic(&train, &labels, 1.0, &schema).map_err(|e| e.to_string())?,
            ))?;
            if boosted >= logistic {
                boosted_leg += 1;
            }
            if forest >= logistic {
                forest_leg += 1;
            }
            margins.push(format!("{:+.3}/{:+.3}", boosted - logistic, forest - logistic));
        }
        if boosted_leg < 3 || forest_leg < 3 {
            return Err(format!(
                "macro-F1 ordering failed: boosted>=logistic {boosted_leg}/5, forest>=logistic {forest_leg}/5 (margins {})",
                margins.join(", ")
            ));
        }
        Ok(format!(
            "macro-F1 >= logistic on planted interactions: boosted {boosted_leg}/5, forest {forest_leg}/5"
        ))
    });

    gate.criterion("A7", "metrics-oracle", 5.0, || {
        let mut rng = stream_rng(0xacce, 7);
        for case in 0..1000 {
            let n = rng.random_range(1..=200);
            let mut y_true = random_labels(&mut rng, n);
            let mut y_pred = random_labels(&mut rng, n);
            // Degenerate shapes: constant predictions, constant truths,
            // and both constant (kappa's 0/0 guard).
            if case % 10 == 0 {
                let c = SeverityLabel::from_index((case / 10) % 3).unwrap();
                y_pred = vec![c; n];
            }
            if case % 25 == 0 {
                let c = SeverityLabel::from_index((case / 25) % 3).unwrap();
                y_true = vec![c; n];
            }
            if case % 50 == 0 {
                let c = SeverityLabel::from_index((case / 50) % 3).unwrap();
                y_true = vec![c; n];
                y_pred = vec![c; n];
            }
            let got = evaluate(&y_true, &y_pred).map_err(|e| e.to_string())?;
            let want = naive_evaluate(&y_true, &y_pred);
            let exact = got.n == want.n
                && got.accuracy == want.accuracy
                && got.kappa == want.kappa
                && got.macro_f1 == want.macro_f1
                && got.per_class_precision == want.per_class_precision
                && got.per_class_recall == want.per_class_recall
                && got.per_class_f1 == want.per_class_f1
                && got.confusion.counts == want.confusion.counts;
            if !exact {
                return Err(format!(
                    "case {case} (n={n}) diverged: got acc {}, kappa {}, macro {}; want acc {}, kappa {}, macro {}",
                    got.accuracy, got.kappa, got.macro_f1, want.accuracy, want.kappa, want.macro_f1
                ));
            }
        }
        Ok("1000 random label vectors exactly equal, degenerate shapes included".into())
    });

    gate.criterion("A8", "alignment-formulas", 1.0, || {
        let trunc2 = |x: f64| (x * 100.0).floor() / 100.0;
        let s1 = trunc2(alignment_score(0.67, 0.57));
        if s1 != 0.61 {
            return Err(format!("alignment_score(0.67, 0.57) truncates to {s1}, want 0.61"));
        }
        let s2 = trunc2(alignment_score(0.62, 0.50));
        if s2 != 0.55 {
            return Err(format!("alignment_score(0.62, 0.50) truncates to {s2}, want 0.55"));
        }

        let lexicon = Lexicon::default();
        let names: Vec<String> = (0..schema.len()).map(|i| schema.name(i).to_string()).collect();
        let mut rng = stream_rng(0xacce, 8);
        for case in 0..100 {
            // Three distinct top-attributed features.
            let mut top: Vec<String> = Vec::new();
            while top.len() < 3 {
                let pick = names[rng.random_range(0..names.len())].clone();
                if !top.contains(&pick) {
                    top.push(pick);
                }
            }
            // A narrative mentioning a random feature subset, sometimes
            // seeded with top features so both aligned outcomes occur.
            let mut chosen: Vec<&String> = names.iter().filter(|_| rng.random_range(0..8) == 0).collect();
            if case % 2 == 0 {
                chosen.push(&top[0]);
                chosen.push(&top[1]);
            }
            let phrases: Vec<String> = chosen.iter().map(|f| lexicon.surface(f)).collect();
            let text = format!("Observed factors: {}.", phrases.join(", "));

            let (recall, precision, aligned) = align(&top, &text, &lexicon, 3);

            let lower = text.to_lowercase();
            let mentioned: Vec<&String> = names
                .iter()
                .filter(|f| lexicon.phrases(f).iter().any(|p| lower.contains(p.as_str())))
                .collect();
            let hits = top.iter().filter(|t| mentioned.iter().any(|m| m == t)).count();
            let want_recall = hits as f64 / 3.0;
            let want_precision =
                if mentioned.is_empty() { 0.0 } else { hits as f64 / mentioned.len() as f64 };
            let want_aligned = hits >= 2;
            if recall != want_recall || precision != want_precision || aligned != want_aligned {
                return Err(format!(
                    "case {case}: got ({recall}, {precision}, {aligned}), want ({want_recall}, {want_precision}, {want_aligned}) for {text:?}"
                ));
            }
        }
        Ok("paper-value truncations 0.61/0.55 exact; set logic matches a hand oracle on 100 random cases".into())
    });

    gate.criterion("A9", "hybrid-plumbing", 60.0, || {
        // Direct label extraction.
        let cases = [
            ("Severity: Fatal. Ejection at night.", Some(SeverityLabel::Fatal)),
            ("Likely no injury, property damage only.", Some(SeverityLabel::NoInjury)),
            ("Several people were injured.", Some(SeverityLabel::Injury)),
            ("No conclusion can be drawn.", None),
        ];
        for (text, want) in cases {
            let got = parse_prediction(text);
            if got != want {
                return Err(format!("parse_prediction({text:?}) = {got:?}, want {want:?}"));
            }
        }

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = serde_json::json!({
            "model": {"kind": "boosted", "n_rounds": 8, "max_depth": 3},
            "split": {"n_test": 150, "n_train": 700},
            "synth": {"n_events": 900, "rng_seed": 11},
            "gating": {"threshold": 0.0, "gated_mass": "fatal_only"},
            "seed": 5
        });
        fs::write(dir.path().join("config.json"), config.to_string()).map_err(|e| e.to_string())?;
        let cfg = ["--config", "config.json"];
        expect_ok(&rax(dir.path(), &[&["synth"], &cfg[..]].concat()), "synth")?;
        expect_ok(&rax(dir.path(), &[&["train"], &cfg[..]].concat()), "train")?;
        expect_ok(&rax(dir.path(), &[&["explain", "--limit", "6"], &cfg[..]].concat()), "explain")?;
        expect_ok(&rax(dir.path(), &[&["align"], &cfg[..]].concat()), "align")?;
        let report: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("reports/alignment.json"))
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let score = report["alignment_score"].as_f64().unwrap_or(-1.0);
        let fraction = report["aligned_fraction"].as_f64().unwrap_or(-1.0);
        if score != 1.0 || fraction != 1.0 {
            return Err(format!(
                "template alignment_score {score}, aligned_fraction {fraction}; want 1.0/1.0"
            ));
        }

        // Scripted local server: response labels surface in the output.
        let http_config = serde_json::json!({
            "model": {"kind": "boosted", "n_rounds": 8, "max_depth": 3},
            "split": {"n_test": 150, "n_train": 700},
            "synth": {"n_events": 900, "rng_seed": 11},
            "gating": {"threshold": 0.0, "gated_mass": "fatal_only"},
            "narrative": {"backend": "http", "model": "mock-model", "timeout_secs": 5.0, "max_retries": 0},
            "seed": 5
        });
        fs::write(dir.path().join("http.json"), http_config.to_string())
            .map_err(|e| e.to_string())?;
        let base_url = serve_chat_completions(3, "Severity: Fatal. Ejection at night.");
        let out = rax(
            dir.path(),
            &["explain", "--limit", "3", "--backend-url", &base_url, "--config", "http.json"],
        );
        expect_ok(&out, "explain over http")?;
        let narratives = fs::read_to_string(dir.path().join("reports/narratives.jsonl"))
            .map_err(|e| e.to_string())?;
        for line in narratives.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if v["predicted_class"] != "Fatal" {
                return Err(format!("mock response not parsed into a label: {line}"));
            }
        }

        // Unreachable server: transport failure becomes exit code 3.
        let dead_port = {
            let l = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
            l.local_addr().map_err(|e| e.to_string())?.port()
        };
        let dead_url = format!("http://127.0.0.1:{dead_port}");
        let out = rax(
            dir.path(),
            &["explain", "--limit", "2", "--backend-url", &dead_url, "--config", "http.json"],
        );
        if out.status.code() != Some(3) {
            return Err(format!(
                "dead backend exited {:?}, want 3: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok("template align 1.0/1.0; mock server labels parsed; transport failure exits 3".into())
    });

    gate.criterion("A10", "scoring-throughput", 120.0, || {
        let borrow = fitted.borrow();
        let Some((model, _, _)) = borrow.as_ref() else {
            return Err("needs the 400x8 model from A3".into());
        };
        let rows =
            generate(&SynthConfig { n_events: 100_000, ..SynthConfig::default() })
                .map_err(|e| e.to_string())?;
        let (_, stats) = score_batch(model, &schema, &rows).map_err(|e| e.to_string())?;
        let detail = format!(
            "measured {:.0} rows/s over {} rows with the 400-tree depth-8 model (floor 20,000)",
            stats.rows_per_second, stats.rows
        );
        *corpus_100k.borrow_mut() = Some(rows);
        if stats.rows_per_second < 20_000.0 {
            return Err(detail);
        }
        Ok(detail)
    });

    gate.criterion("A11", "store-integrity", 120.0, || {
        let rows = corpus_100k
            .borrow_mut()
            .take()
            .ok_or_else(|| "needs the 100k-row corpus from A10".to_string())?;
        let mut by_month: BTreeMap<(i32, u32), Vec<EventFeatureRow>> = BTreeMap::new();
        for row in rows {
            let key = PartitionKey::of(row.timestamp);
            by_month.entry((key.year, key.month)).or_default().push(row);
        }
        if by_month.len() != 12 {
            return Err(format!("expected 12 partitions, got {}", by_month.len()));
        }

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut store =
            FeatureStore::create(&dir.path().join("store"), &schema).map_err(|e| e.to_string())?;
        for ((year, month), part) in &by_month {
            let key = PartitionKey::new(*year, *month).map_err(|e| e.to_string())?;
            store.write_partition(key, part).map_err(|e| e.to_string())?;
        }
        if store.manifest().partitions.len() != 12 {
            return Err(format!(
                "manifest lists {} partitions, want 12",
                store.manifest().partitions.len()
            ));
        }

        // Bit-exact round trip, field by field.
        let mut rows_checked = 0u64;
        for ((year, month), part) in &by_month {
            let key = PartitionKey::new(*year, *month).unwrap();
            let got = store.read_partition(key).map_err(|e| e.to_string())?;
            if got.len() != part.len() {
                return Err(format!("partition {year}-{month:02} row count changed"));
            }
            for (a, b) in got.iter().zip(part) {
                let values_exact = a.values.len() == b.values.len()
                    && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits());
                if !(values_exact
                    && a.collision_id == b.collision_id
                    && a.timestamp == b.timestamp
                    && a.label == b.label
                    && a.missing == b.missing
                    && a.factors == b.factors)
                {
                    return Err(format!("event {} not bit-exact after round trip", b.collision_id));
                }
                rows_checked += 1;
            }
        }
        if rows_checked != 100_000 {
            return Err(format!("round-tripped {rows_checked} rows, want 100000"));
        }

        // Temporal split sizes and boundary ordering.
        let (train, test) = store.temporal_split(&SplitSpec::default()).map_err(|e| e.to_string())?;
        if train.len() != 20_000 || test.len() != 5_000 {
            return Err(format!("split produced {}/{}, want 20000/5000", train.len(), test.len()));
        }
        let train_max = train.iter().map(|r| (r.timestamp, r.collision_id)).max().unwrap();
        let test_min = test.iter().map(|r| (r.timestamp, r.collision_id)).min().unwrap();
        if train_max > test_min {
            return Err(format!("split boundary out of order: {train_max:?} > {test_min:?}"));
        }

        // Interrupted writes: no truncated prefix of a partition file may
        // read back as valid, and stray temp files are invisible.
        let (&(year, month), expected) = by_month.iter().next().unwrap();
        let key = PartitionKey::new(year, month).unwrap();
        let path = store
            .root()
            .join(format!("year={year:04}"))
            .join(format!("month={month:02}"))
            .join("part.raxf");
        let original = fs::read(&path).map_err(|e| e.to_string())?;
        let mut cuts: Vec<usize> = (0..original.len()).step_by((original.len() / 40).max(1)).collect();
        cuts.extend([1, 4, 10, 100, original.len() / 2, original.len() - 1]);
        cuts.retain(|&c| c < original.len());
        cuts.sort_unstable();
        cuts.dedup();
        let mut torn_rejected = 0;
        for &cut in &cuts {
            fs::write(&path, &original[..cut]).map_err(|e| e.to_string())?;
            if store.read_partition(key).is_ok() {
                return Err(format!("torn partition accepted at {cut}/{} bytes", original.len()));
            }
            torn_rejected += 1;
        }
        fs::write(&path, &original).map_err(|e| e.to_string())?;
        fs::write(path.with_file_name(".part.raxf.tmp4242"), b"leftover garbage")
            .map_err(|e| e.to_string())?;
        let restored = store.read_partition(key).map_err(|e| e.to_string())?;
        if restored.len() != expected.len() {
            return Err("restored partition changed size".into());
        }
        store.verify_integrity().map_err(|e| e.to_string())?;
        Ok(format!(
            "100k rows / 12 partitions bit-exact; split 20000/5000 ordered; {torn_rejected} torn prefixes all rejected"
        ))
    });

    gate.finish();
}
