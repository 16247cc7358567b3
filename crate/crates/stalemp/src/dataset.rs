//! Dataset I/O and synthetic data.
//!
//! On-disk formats:
//! - edge list: UTF-8 text, one `src<TAB>dst` pair per line, `#` starts a comment;
//! - features: binary, header of two u64 LE (num_nodes, feat_dim) then row-major f32 LE;
//! - labels: text, one integer per line, row order = node order.
//!
//! Node count and feature-row order are declared by the features header, so
//! edge ids must stay below it; ids that never appear are isolated nodes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tape::Matrix;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads graph + features + labels; the features header declares `num_nodes`.
pub fn load_edge_list(
    edge_path: &Path,
    features_path: &Path,
    labels_path: &Path,
) -> Result<(Graph, Matrix, Vec<usize>)> {
    let features = read_features(features_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != features.rows {
        return Err(Error::CountMismatch {
            what: format!("labels in {}", labels_path.display()),
            got: labels.len(),
            expected: features.rows,
        });
    }
    let edges = read_edges(edge_path, features.rows)?;
    let graph = Graph::from_edges(features.rows, &edges)?;
    Ok((graph, features, labels))
}

pub fn read_edges(path: &Path, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split('\t');
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: format!("expected src<TAB>dst, got {raw:?}"),
                })
        };
        let src = parse(it.next())?;
        let dst = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: "trailing fields".into(),
            });
        }
        for id in [src, dst] {
            if id >= num_nodes {
                return Err(Error::NodeIdRange {
                    id,
                    num_nodes,
                    context: format!("{}:{}", path.display(), lineno + 1),
                });
            }
        }
        edges.push((src, dst));
    }
    Ok(edges)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            reason: "feature file shorter than its header".into(),
        });
    }
    let num_nodes = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let feat_dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = 16 + num_nodes * feat_dim * 4;
    if bytes.len() != expected {
        return Err(Error::CountMismatch {
            what: format!("feature payload bytes in {}", path.display()),
            got: bytes.len(),
            expected,
        });
    }
    let mut data = Vec::with_capacity(num_nodes * feat_dim);
    for chunk in bytes[16..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::InvalidArg {
                op: "read_features".into(),
                details: format!("non-finite feature value in {}", path.display()),
            });
        }
        data.push(v as f64);
    }
    Ok(Matrix::from_vec(num_nodes, feat_dim, data))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<usize>().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: format!("expected a class index, got {raw:?}"),
        })?;
        labels.push(v);
    }
    Ok(labels)
}

pub fn write_edge_list(path: &Path, g: &Graph) -> Result<()> {
    let mut out = String::from("# src\tdst (undirected; one direction per line)\n");
    for i in 0..g.num_nodes {
        for &j in g.neighbors_of(i) {
            if i <= j {
                out.push_str(&format!("{i}\t{j}\n"));
            }
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&(features.rows as u64).to_le_bytes())
        .and_then(|_| f.write_all(&(features.cols as u64).to_le_bytes()))
        .map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(features.data.len() * 4);
    for &v in &features.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Stochastic block model configuration. Blocks are contiguous id ranges;
/// labels are block ids; features are a per-block mean direction plus noise,
/// quantized through f32 so a file round trip is lossless.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SbmConfig {
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub seed: u64,
    /// Per-coordinate feature noise standard deviation.
    pub noise: f64,
    /// Norm of each block-mean direction.
    pub mean_scale: f64,
    /// Fraction of nodes whose reported label is flipped to another block.
    /// A small positive value gives the cross-entropy landscape a finite
    /// minimizer, so training settles instead of racing logits forever.
    pub label_noise: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            n: 200,
            blocks: 2,
            p_in: 0.2,
            p_out: 0.05,
            feat_dim: 24,
            seed: 0,
            noise: 0.075,
            mean_scale: 0.3,
            label_noise: 0.025,
        }
    }
}

impl SbmConfig {
    pub fn block_of(&self, node: usize) -> usize {
        // contiguous blocks: block b covers [b*n/blocks, (b+1)*n/blocks)
        (node * self.blocks) / self.n
    }
}

/// Samples an SBM graph with separable features. Deterministic for a fixed seed.
pub fn synth_sbm(cfg: &SbmConfig) -> Result<(Graph, Matrix, Vec<usize>)> {
    if cfg.n == 0 || cfg.blocks == 0 || cfg.blocks > cfg.n || cfg.feat_dim == 0 {
        return Err(Error::InvalidArg {
            op: "synth_sbm".into(),
            details: format!("n={} blocks={} feat_dim={}", cfg.n, cfg.blocks, cfg.feat_dim),
        });
    }
    if !(0.0..=1.0).contains(&cfg.p_in) || !(0.0..=1.0).contains(&cfg.p_out) {
        return Err(Error::InvalidArg {
            op: "synth_sbm".into(),
            details: "edge probabilities must lie in [0,1]".into(),
        });
    }
    if !(0.0..1.0).contains(&cfg.label_noise) {
        return Err(Error::InvalidArg {
            op: "synth_sbm".into(),
            details: "label_noise must lie in [0,1)".into(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| cfg.block_of(i)).collect();

    // Block mean directions: seeded Gaussian, normalized, scaled.
    let mut means = vec![0.0f64; cfg.blocks * cfg.feat_dim];
    for b in 0..cfg.blocks {
        let row = &mut means[b * cfg.feat_dim..(b + 1) * cfg.feat_dim];
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v *= cfg.mean_scale / norm;
        }
    }
    let mut feat = vec![0.0f64; cfg.n * cfg.feat_dim];
    for i in 0..cfg.n {
        let b = labels[i];
        for f in 0..cfg.feat_dim {
            let raw = means[b * cfg.feat_dim + f]
                + cfg.noise * rng.sample::<f64, _>(StandardNormal);
            feat[i * cfg.feat_dim + f] = raw as f32 as f64;
        }
    }

    // Upper-triangle pair sampling with geometric gap skipping per probability run.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let sample_run = |rng: &mut ChaCha20Rng, i: usize, lo: usize, hi: usize, p: f64, edges: &mut Vec<(usize, usize)>| {
        if p <= 0.0 || lo >= hi {
            return;
        }
        if p >= 1.0 {
            for j in lo..hi {
                edges.push((i, j));
            }
            return;
        }
        let log1mp = (1.0 - p).ln();
        let mut j = lo;
        loop {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let gap = (u.ln() / log1mp).floor() as usize;
            j = match j.checked_add(gap) {
                Some(v) => v,
                None => break,
            };
            if j >= hi {
                break;
            }
            edges.push((i, j));
            j += 1;
        }
    };
    for i in 0..cfg.n {
        let b = labels[i];
        let block_end = ((b + 1) * cfg.n) / cfg.blocks;
        sample_run(&mut rng, i, i + 1, block_end, cfg.p_in, &mut edges);
        sample_run(&mut rng, i, block_end, cfg.n, cfg.p_out, &mut edges);
    }
    let graph = Graph::from_edges(cfg.n, &edges)?;

    // Label flips are drawn last so the graph and features for a given seed
    // are unchanged by the label_noise setting.
    let flips = ((cfg.n as f64) * cfg.label_noise).round() as usize;
    if flips > 0 && cfg.blocks > 1 {
        let mut ids: Vec<usize> = (0..cfg.n).collect();
        ids.shuffle(&mut rng);
        for &i in ids.iter().take(flips) {
            let shift = 1 + rng.gen_range(0..cfg.blocks - 1);
            labels[i] = (labels[i] + shift) % cfg.blocks;
        }
    }
    Ok((graph, Matrix::from_vec(cfg.n, cfg.feat_dim, feat), labels))
}

/// Seeded 20%-per-class holdout; returns (train_mask, val_mask).
pub fn split_per_class(labels: &[usize], frac: f64, seed: u64) -> (Vec<bool>, Vec<bool>) {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut val = vec![false; labels.len()];
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let take = ((members.len() as f64) * frac).floor() as usize;
        for &i in members.iter().take(take) {
            val[i] = true;
        }
    }
    let train: Vec<bool> = val.iter().map(|v| !v).collect();
    (train, val)
}
