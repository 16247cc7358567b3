//! Dataset assembly and the end-to-end training command: builds the trainer
//! from a run config, trains for the configured epochs, and writes
//! metrics.jsonl, checkpoints, optional bound diagnostics, and summary.json
//! into the output directory.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use stalemp::checkpoint::{load_params, save_params};
use stalemp::dataset;
use stalemp::graph::Graph;
use stalemp::history::HistoryStore;
use stalemp::layer::{Model, ModelConfig};
use stalemp::oracle::{self, ConvergenceReport};
use stalemp::tape::Matrix;
use stalemp::train::Trainer;

use crate::config::RunConfig;
use crate::diagnostics::{self, DiagnosticsFiles};

/// Loads or synthesizes the dataset named by the config.
pub fn build_dataset(cfg: &RunConfig) -> Result<(Graph, Matrix, Vec<usize>)> {
    let (graph, features, labels) = if let Some(params) = &cfg.synth_sbm {
        dataset::synth_sbm(&params.resolve(cfg.seed))?
    } else {
        let edge_list = cfg.edge_list.as_ref().expect("validated");
        let feats = cfg.features.as_ref().expect("validated");
        let labels = cfg.labels.as_ref().expect("validated");
        dataset::load_edge_list(
            Path::new(edge_list),
            Path::new(feats),
            Path::new(labels),
        )?
    };
    let graph = if cfg.add_self_loops {
        graph.with_self_loops()
    } else {
        graph
    };
    Ok((graph, features, labels))
}

/// Builds the model + trainer for a config, applying any warm start.
pub fn build_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let (graph, features, labels) = build_dataset(cfg)?;
    let num_classes = labels
        .iter()
        .max()
        .map(|&m| m + 1)
        .ok_or_else(|| anyhow!("empty label set"))?;
    let model_cfg = ModelConfig {
        feat_dim: features.cols,
        hidden: cfg.hidden,
        num_classes,
        num_layers: cfg.layers,
        augment: cfg.augment_mode()?,
        penalty_enabled: !cfg.gamma_off,
    };
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let warm = match &cfg.warm_start {
        Some(dir) => Some(resolve_warm_start(Path::new(dir))?),
        None => None,
    };
    if let Some((params_path, _)) = &warm {
        load_params(params_path, &mut model.flat_params_mut())
            .with_context(|| format!("warm start from {}", params_path.display()))?;
    }
    let mut trainer = Trainer::new(graph, features, labels, model, cfg.train_config())?;
    if let Some((_, Some(history_path))) = &warm {
        let features = trainer.store.level(0)?.h.clone();
        trainer.store =
            HistoryStore::load(history_path, &features, &trainer.model.hidden_dims())
                .with_context(|| format!("warm start from {}", history_path.display()))?;
    }
    Ok(trainer)
}

/// A warm-start directory holds `final.params.bin` (+ optional
/// `final.history.bin`), either directly or under `checkpoints/`.
fn resolve_warm_start(dir: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    for base in [dir.join("checkpoints"), dir.to_path_buf()] {
        let params = base.join("final.params.bin");
        if params.is_file() {
            let history = base.join("final.history.bin");
            return Ok((params, history.is_file().then_some(history)));
        }
    }
    bail!("warm-start directory {} has no final.params.bin", dir.display())
}

#[derive(Serialize)]
struct LipschitzSummary {
    betas: Vec<f64>,
    composite: f64,
}

#[derive(Serialize)]
struct Summary {
    best_val_acc: f64,
    best_epoch: u64,
    final_train_acc: f64,
    final_val_acc: f64,
    epochs: u64,
    total_steps: usize,
    evicted_total: usize,
    bound_violations: Option<usize>,
    lipschitz: LipschitzSummary,
    convergence: ConvergenceReport,
    wall_ms: f64,
}

/// Outcome of a finished training run, for callers that aggregate (sweep).
pub struct TrainOutcome {
    pub best_val_acc: f64,
    pub best_epoch: u64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out_dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    cfg.write_echo(&out_dir)?;

    let mut trainer = build_trainer(cfg)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?,
    );

    let run_start = Instant::now();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut last = (0.0, 0.0);
    let mut evicted_total = 0usize;
    let mut total_steps = 0usize;
    let mut bound_violations: Option<usize> = None;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let steps = trainer.train_epoch()?;
        let wall_ms = epoch_start.elapsed().as_secs_f64() * 1e3;
        evicted_total += steps.iter().map(|s| s.evicted).sum::<usize>();
        total_steps += steps.len();
        let row = trainer.epoch_metrics(epoch, &steps, wall_ms)?;
        if row.val_acc > best_val_acc {
            best_val_acc = row.val_acc;
            best_epoch = epoch;
        }
        last = (row.train_acc, row.val_acc);
        serde_json::to_writer(&mut metrics, &row)?;
        metrics.write_all(b"\n")?;

        if cadence_hits(cfg.diagnose_every, epoch, cfg.epochs) {
            let outcome = diagnostics::write_run_diagnostics(
                &trainer,
                cfg,
                &diag_paths(&out_dir, epoch)?,
            )?;
            *bound_violations.get_or_insert(0) += outcome.violations;
        }
        if cadence_hits(cfg.checkpoint_every, epoch, 0) {
            write_checkpoint(&trainer, &out_dir, &format!("epoch_{epoch:04}"))?;
        }
    }
    metrics.flush()?;
    write_checkpoint(&trainer, &out_dir, "final")?;

    let lambda = cfg.effective_lambda();
    let betas: Vec<f64> = oracle::lipschitz_estimates(
        &trainer.model,
        &trainer.graph,
        &trainer.store,
        &trainer.cent,
        cfg.seed,
    )?
    .iter()
    .map(|l| l.beta)
    .collect();
    let composite = oracle::composite_lipschitz(&betas, lambda);
    let convergence = oracle::convergence_stats(
        &trainer.loss_history,
        &trainer.grad_sq_norms,
        &trainer.first_epoch_grads,
        cfg.lr,
        composite,
    );

    let summary = Summary {
        best_val_acc,
        best_epoch,
        final_train_acc: last.0,
        final_val_acc: last.1,
        epochs: cfg.epochs,
        total_steps,
        evicted_total,
        bound_violations,
        lipschitz: LipschitzSummary { betas, composite },
        convergence,
        wall_ms: run_start.elapsed().as_secs_f64() * 1e3,
    };
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", summary_path.display()))?;

    Ok(TrainOutcome {
        best_val_acc,
        best_epoch,
        final_train_acc: last.0,
        final_val_acc: last.1,
    })
}

/// True on every multiple of the cadence, plus `last` so a final-epoch pass
/// always exists when a cadence was requested at all.
fn cadence_hits(every: Option<u64>, epoch: u64, last: u64) -> bool {
    match every {
        Some(n) if n > 0 => epoch % n == 0 || epoch == last,
        _ => false,
    }
}

fn diag_paths(out_dir: &Path, epoch: u64) -> Result<DiagnosticsFiles> {
    let dir = out_dir.join("diagnostics");
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))?;
    Ok(DiagnosticsFiles {
        csv: dir.join(format!("epoch_{epoch:04}.csv")),
        json: dir.join(format!("epoch_{epoch:04}.json")),
    })
}

fn write_checkpoint(trainer: &Trainer, out_dir: &Path, stem: &str) -> Result<()> {
    let dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))?;
    save_params(
        &dir.join(format!("{stem}.params.bin")),
        &trainer.model.flat_params(),
    )?;
    trainer
        .store
        .save(&dir.join(format!("{stem}.history.bin")))?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let Some(params) = &cfg.synth_sbm else {
        bail!("synth needs --synth-sbm parameters");
    };
    let out_dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let (graph, features, labels) = dataset::synth_sbm(&params.resolve(cfg.seed))?;
    dataset::write_edge_list(&out_dir.join("edges.tsv"), &graph)?;
    dataset::write_features(&out_dir.join("features.bin"), &features)?;
    dataset::write_labels(&out_dir.join("labels.txt"), &labels)?;
    cfg.write_echo(&out_dir)?;
    println!(
        "wrote {} nodes / {} edges to {}",
        graph.num_nodes,
        graph.num_edges,
        out_dir.display()
    );
    Ok(())
}
