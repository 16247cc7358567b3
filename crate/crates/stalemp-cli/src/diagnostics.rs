//! Bound diagnostics: measures true cache staleness, checks the layerwise
//! error bound cluster by cluster, and writes a per-(node, level) CSV plus a
//! JSON summary of Lipschitz estimates, violation counts, and (for in-run
//! diagnostics) convergence statistics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stalemp::checkpoint::load_params;
use stalemp::history::HistoryStore;
use stalemp::layer::{Model, ModelConfig};
use stalemp::oracle::{self, ConvergenceReport, LayerLipschitz};
use stalemp::train::Trainer;

use crate::config::RunConfig;
use crate::runner::build_dataset;

pub struct DiagnosticsFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
}

pub struct DiagOutcome {
    pub nodes: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

#[derive(Serialize)]
struct LipschitzJson {
    per_layer: Vec<LayerLipschitz>,
    betas: Vec<f64>,
    composite: f64,
}

#[derive(Serialize)]
struct BoundJson {
    nodes: usize,
    violations: usize,
    max_ratio: f64,
    median_ratio: f64,
    /// Worst cache-vs-exact row distance per level.
    level_staleness: Vec<f64>,
    /// Spectral-norm distance between cached and exact level inputs (the
    /// staleness factor the bound uses).
    level_matrix_staleness: Vec<f64>,
}

#[derive(Serialize)]
struct DiagnosticsJson {
    lipschitz: LipschitzJson,
    bound: BoundJson,
    convergence: Option<ConvergenceReport>,
}

/// In-run diagnostics: the trainer's loss/gradient history is available, so
/// the JSON includes convergence statistics.
pub fn write_run_diagnostics(
    trainer: &Trainer,
    cfg: &RunConfig,
    files: &DiagnosticsFiles,
) -> Result<DiagOutcome> {
    write_diagnostics(trainer, cfg, files, true)
}

/// Standalone snapshot diagnostics: no training history exists, so the
/// convergence field is null.
pub fn write_snapshot_diagnostics(
    trainer: &Trainer,
    cfg: &RunConfig,
    files: &DiagnosticsFiles,
) -> Result<DiagOutcome> {
    write_diagnostics(trainer, cfg, files, false)
}

fn write_diagnostics(
    trainer: &Trainer,
    cfg: &RunConfig,
    files: &DiagnosticsFiles,
    include_convergence: bool,
) -> Result<DiagOutcome> {
    let n = trainer.graph.num_nodes;
    let staleness = oracle::measure_staleness(&trainer.model, &trainer.graph, &trainer.store)?;

    // Bound check over every node, batched per partition cluster so each node
    // is verified in the batch context it actually trains in.
    let mut per_node: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut violations = 0usize;
    let mut betas = Vec::new();
    let mut level_staleness = Vec::new();
    let mut level_matrix_staleness = Vec::new();
    for c in 0..trainer.partition.num_clusters {
        let members = trainer.partition.members(c);
        if members.is_empty() {
            continue;
        }
        let report = oracle::verify_bound(
            &trainer.model,
            &trainer.graph,
            &trainer.store,
            &trainer.cent,
            &members,
            cfg.seed,
        )?;
        violations += report.violations;
        for row in &report.rows {
            per_node[row.node] = Some((row.error, row.bound));
        }
        betas = report.betas;
        level_staleness = report.level_staleness;
        level_matrix_staleness = report.level_matrix_staleness;
    }

    let mut csv = String::from("node,layer,s_true,final_error,bound\n");
    let mut ratios: Vec<f64> = Vec::new();
    let mut max_ratio = 0.0f64;
    for node in 0..n {
        let (error, bound) = per_node[node].unwrap_or((0.0, 0.0));
        if bound > 0.0 {
            let r = error / bound;
            ratios.push(r);
            max_ratio = max_ratio.max(r);
        }
        for (level, level_rows) in staleness.iter().enumerate() {
            csv.push_str(&format!(
                "{node},{level},{},{error},{bound}\n",
                level_rows[node]
            ));
        }
    }
    std::fs::write(&files.csv, csv)
        .with_context(|| format!("writing {}", files.csv.display()))?;

    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ratio = if ratios.is_empty() {
        0.0
    } else {
        ratios[ratios.len() / 2]
    };

    let lambda = cfg.effective_lambda();
    let per_layer = oracle::lipschitz_estimates(
        &trainer.model,
        &trainer.graph,
        &trainer.store,
        &trainer.cent,
        cfg.seed,
    )?;
    let composite = oracle::composite_lipschitz(&betas, lambda);
    let convergence = include_convergence.then(|| {
        oracle::convergence_stats(
            &trainer.loss_history,
            &trainer.grad_sq_norms,
            &trainer.first_epoch_grads,
            cfg.lr,
            composite,
        )
    });

    let json = DiagnosticsJson {
        lipschitz: LipschitzJson {
            per_layer,
            betas,
            composite,
        },
        bound: BoundJson {
            nodes: n,
            violations,
            max_ratio,
            median_ratio,
            level_staleness,
            level_matrix_staleness,
        },
        convergence,
    };
    std::fs::write(&files.json, serde_json::to_string_pretty(&json)? + "\n")
        .with_context(|| format!("writing {}", files.json.display()))?;

    Ok(DiagOutcome {
        nodes: n,
        violations,
        max_ratio,
    })
}

/// Checks a saved model + cache snapshot against the layerwise error bound.
/// Exit code 0 when the bound holds everywhere, 2 when any node violates it.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<i32> {
    let Some(params_path) = cfg.params.as_deref() else {
        bail!("diagnose needs --params pointing at a parameter container");
    };
    let Some(history_path) = cfg.history.as_deref() else {
        bail!("diagnose needs --history pointing at a cache snapshot");
    };
    for p in [params_path, history_path] {
        if !Path::new(p).is_file() {
            bail!("missing artifact: {p}");
        }
    }

    let (graph, features, labels) = build_dataset(cfg)?;
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(1);
    let model_cfg = ModelConfig {
        feat_dim: features.cols,
        hidden: cfg.hidden,
        num_classes,
        num_layers: cfg.layers,
        augment: cfg.augment_mode()?,
        penalty_enabled: !cfg.gamma_off,
    };
    let mut model = Model::new(model_cfg, cfg.seed)?;
    load_params(Path::new(params_path), &mut model.flat_params_mut())
        .with_context(|| format!("loading parameters from {params_path}"))?;
    let hidden_dims = model.hidden_dims();
    let mut trainer = Trainer::new(graph, features, labels, model, cfg.train_config())?;
    let feats = trainer.store.level(0)?.h.clone();
    trainer.store = HistoryStore::load(Path::new(history_path), &feats, &hidden_dims)
        .with_context(|| format!("loading cache snapshot from {history_path}"))?;

    let out_dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    cfg.write_echo(&out_dir)?;
    let files = DiagnosticsFiles {
        csv: out_dir.join("diagnostics.csv"),
        json: out_dir.join("diagnostics.json"),
    };
    let outcome = write_snapshot_diagnostics(&trainer, cfg, &files)?;
    println!(
        "checked {} nodes: {} bound violations (max error/bound ratio {:.6})",
        outcome.nodes, outcome.violations, outcome.max_ratio
    );
    Ok(if outcome.violations == 0 { 0 } else { 2 })
}
