//! Ablation sweep: runs a cell per point of the
//! components × lambda × batch-clusters × augment grid, each into its own
//! subdirectory, and aggregates final accuracies into one combined CSV.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use crate::config::{CommonArgs, RunConfig};
use crate::runner;

#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Drift-weight grid, comma separated (e.g. 0.1,0.3,0.5,0.8)
    #[arg(long, value_delimiter = ',')]
    pub grid_lambda: Option<Vec<f64>>,
    /// Batch-size grid in clusters per batch, comma separated (e.g. 5,10,20)
    #[arg(long, value_delimiter = ',')]
    pub grid_batch_clusters: Option<Vec<usize>>,
    /// Staleness-channel grid, comma separated subset of none,concat,sum
    #[arg(long, value_delimiter = ',')]
    pub grid_augment: Option<Vec<String>>,
    /// Staleness-mechanism grid, comma separated subset of on,off; "off"
    /// disables the penalty, the drift loss, and the staleness channel at once
    #[arg(long, value_delimiter = ',')]
    pub grid_components: Option<Vec<String>>,
}

struct Cell {
    name: String,
    components: String,
    lambda: f64,
    batch_clusters: usize,
    augment: String,
    cfg: RunConfig,
}

fn build_cells(base: &RunConfig) -> Result<Vec<Cell>> {
    let lambdas = base
        .grid_lambda
        .clone()
        .unwrap_or_else(|| vec![base.lambda]);
    let batch_clusters = base
        .grid_batch_clusters
        .clone()
        .unwrap_or_else(|| vec![base.batch_clusters]);
    let augments = base
        .grid_augment
        .clone()
        .unwrap_or_else(|| vec![base.augment.clone()]);
    let components = base
        .grid_components
        .clone()
        .unwrap_or_else(|| vec!["on".to_string()]);
    if lambdas.is_empty() || batch_clusters.is_empty() || augments.is_empty()
        || components.is_empty()
    {
        bail!("empty sweep");
    }
    for comp in &components {
        if comp != "on" && comp != "off" {
            bail!("--grid-components values must be on or off, got {comp:?}");
        }
    }

    let base_out = PathBuf::from(&base.out);
    let mut cells = Vec::new();
    for comp in &components {
        for &lambda in &lambdas {
            for &bc in &batch_clusters {
                for augment in &augments {
                    let name = format!("comp-{comp}_lam-{lambda}_bc-{bc}_aug-{augment}");
                    let mut cfg = base.clone();
                    cfg.lambda = lambda;
                    cfg.batch_clusters = bc;
                    cfg.augment = augment.clone();
                    if comp == "off" {
                        cfg.gamma_off = true;
                        cfg.stale_loss_off = true;
                        cfg.augment_off = true;
                    }
                    cfg.out = base_out.join("cells").join(&name).to_string_lossy().into_owned();
                    cfg.grid_lambda = None;
                    cfg.grid_batch_clusters = None;
                    cfg.grid_augment = None;
                    cfg.grid_components = None;
                    cells.push(Cell {
                        name,
                        components: comp.clone(),
                        lambda,
                        batch_clusters: bc,
                        augment: augment.clone(),
                        cfg,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Runs the grid; returns the number of failed cells (partial failures do not
/// abort the sweep, they are reported per cell in the combined CSV).
pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let mut base = RunConfig::from_args(&args.common)?;
    if args.grid_lambda.is_some() {
        base.grid_lambda = args.grid_lambda.clone();
    }
    if args.grid_batch_clusters.is_some() {
        base.grid_batch_clusters = args.grid_batch_clusters.clone();
    }
    if args.grid_augment.is_some() {
        base.grid_augment = args.grid_augment.clone();
    }
    if args.grid_components.is_some() {
        base.grid_components = args.grid_components.clone();
    }

    let cells = build_cells(&base)?;
    let out_dir = PathBuf::from(&base.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    base.write_echo(&out_dir)?;

    let mut csv = String::from(
        "cell,components,lambda,batch_clusters,augment,\
         final_train_acc,final_val_acc,best_val_acc,best_epoch,status\n",
    );
    let mut failures = 0usize;
    for cell in &cells {
        let result = cell
            .cfg
            .validate()
            .map_err(anyhow::Error::from)
            .and_then(|()| runner::cmd_train(&cell.cfg));
        match result {
            Ok(outcome) => {
                println!(
                    "cell {}: ok (final val acc {:.4})",
                    cell.name, outcome.final_val_acc
                );
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},ok\n",
                    cell.name,
                    cell.components,
                    cell.lambda,
                    cell.batch_clusters,
                    cell.augment,
                    outcome.final_train_acc,
                    outcome.final_val_acc,
                    outcome.best_val_acc,
                    outcome.best_epoch,
                ));
            }
            Err(e) => {
                failures += 1;
                println!("cell {}: FAILED: {e:#}", cell.name);
                let msg = format!("{e:#}").replace([',', '\n'], ";");
                csv.push_str(&format!(
                    "{},{},{},{},{},,,,,error: {}\n",
                    cell.name,
                    cell.components,
                    cell.lambda,
                    cell.batch_clusters,
                    cell.augment,
                    msg,
                ));
            }
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    println!(
        "sweep: {} cells, {} failed; results in {}",
        cells.len(),
        failures,
        csv_path.display()
    );
    Ok(if failures == 0 { 0 } else { 1 })
}
