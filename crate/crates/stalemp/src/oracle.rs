//! Independent verification route: exact forwards, the layerwise error bound
//! for historical-embedding approximation, and convergence diagnostics.
//!
//! Nothing here touches the tape. Forward values are computed straight from
//! the shared kernels so an exact full-graph pass is bit-identical to the
//! training path evaluated with every node in the batch, while remaining an
//! independent implementation of the math.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::{symmetric_normalize, Centrality, Graph};
use crate::history::HistoryStore;
use crate::kernels;
use crate::layer::{AugmentMode, Model, LEAKY_SLOPE};
use crate::tape::Matrix;
use crate::{streams, subseed};

/// Appends the staleness channel used by concat augmentation; the exact
/// operator carries zeros there (live rows are never stale).
fn with_zero_channel(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols + 1);
    for i in 0..x.rows {
        out.row_mut(i)[..x.cols].copy_from_slice(x.row(i));
    }
    out
}

fn augmented(x: &Matrix, mode: AugmentMode) -> Matrix {
    match mode {
        AugmentMode::Concat => with_zero_channel(x),
        _ => x.clone(),
    }
}

/// One attention layer evaluated exactly: unified softmax over the full
/// neighborhood, every row live. `x` holds one input row per graph node.
fn exact_layer(model: &Model, l: usize, g: &Graph, x: &Matrix) -> Matrix {
    let dim_out = model.dim_out(l);
    let lp = &model.layers[l];
    let xa = augmented(x, model.cfg.augment);
    let n = g.num_nodes;
    let wh = Matrix::from_vec(
        n,
        dim_out,
        kernels::matmul_nn(&xa.data, &lp.w.value.data, n, xa.cols, dim_out),
    );
    let a = &lp.a.value.data;
    let (a_src, a_dst) = a.split_at(dim_out);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        p[i] = kernels::dot(wh.row(i), a_src);
        q[i] = kernels::dot(wh.row(i), a_dst);
    }
    let mut scores = vec![0.0; g.num_edges];
    for i in 0..n {
        for e in g.offsets[i]..g.offsets[i + 1] {
            scores[e] = kernels::leaky_relu(p[i] + q[g.neighbors[e]], LEAKY_SLOPE);
        }
    }
    kernels::softmax_segments(&mut scores, &g.offsets);
    let agg = kernels::attend(&scores, &wh.data, &g.neighbors, &g.offsets, dim_out);
    let mut out = Matrix::from_vec(n, dim_out, agg);
    if l + 1 < model.cfg.num_layers {
        for v in out.data.iter_mut() {
            *v = kernels::elu(*v);
        }
    }
    out
}

/// Exact per-layer outputs for every node; `outputs[l]` feeds level `l+1`.
pub fn full_batch_forward(model: &Model, g: &Graph, features: &Matrix) -> Result<Vec<Matrix>> {
    if features.rows != g.num_nodes || features.cols != model.cfg.feat_dim {
        return Err(Error::Shape {
            op: "full_batch_forward".into(),
            details: format!(
                "features {}x{}, want {}x{}",
                features.rows, features.cols, g.num_nodes, model.cfg.feat_dim
            ),
        });
    }
    let mut outputs = Vec::with_capacity(model.cfg.num_layers);
    let mut x = features.clone();
    for l in 0..model.cfg.num_layers {
        x = exact_layer(model, l, g, &x);
        outputs.push(x.clone());
    }
    Ok(outputs)
}

/// The historical approximation the bound models: per layer, in-batch rows are
/// the live values computed so far and every other row comes from the cache;
/// one softmax over the whole neighborhood; no penalty, no staleness channel.
/// Returns per-layer outputs for the batch rows, batch order.
pub fn substitution_forward(
    model: &Model,
    g: &Graph,
    store: &HistoryStore,
    in_batch: &[usize],
) -> Result<Vec<Matrix>> {
    if store.num_levels() != model.cfg.num_layers {
        return Err(Error::BadLevel {
            level: model.cfg.num_layers - 1,
            levels: store.num_levels(),
        });
    }
    let n = g.num_nodes;
    let mut in_pos = vec![usize::MAX; n];
    for (pos, &node) in in_batch.iter().enumerate() {
        if node >= n {
            return Err(Error::NodeIdRange {
                id: node,
                num_nodes: n,
                context: "substitution batch".into(),
            });
        }
        in_pos[node] = pos;
    }
    let mut outputs = Vec::with_capacity(model.cfg.num_layers);
    // Mixed input rows for level 0 are exact for everyone: level 0 is features.
    let mut mixed = store.level(0)?.h.clone();
    let mut live: Option<Matrix> = None; // batch rows of the previous layer
    for l in 0..model.cfg.num_layers {
        if l > 0 {
            // cached rows for out-of-batch nodes, live rows for the batch
            mixed = store.level(l)?.h.clone();
            let live = live.as_ref().unwrap();
            for (pos, &node) in in_batch.iter().enumerate() {
                mixed.row_mut(node).copy_from_slice(live.row(pos));
            }
        }
        let dim_out = model.dim_out(l);
        let lp = &model.layers[l];
        let xa = augmented(&mixed, model.cfg.augment);
        let wh = Matrix::from_vec(
            n,
            dim_out,
            kernels::matmul_nn(&xa.data, &lp.w.value.data, n, xa.cols, dim_out),
        );
        let a = &lp.a.value.data;
        let (a_src, a_dst) = a.split_at(dim_out);
        let mut out = Matrix::zeros(in_batch.len(), dim_out);
        for (pos, &i) in in_batch.iter().enumerate() {
            let p_i = kernels::dot(wh.row(i), a_src);
            let deg = g.degrees[i];
            let mut scores = Vec::with_capacity(deg);
            for e in g.offsets[i]..g.offsets[i + 1] {
                let j = g.neighbors[e];
                let q_j = kernels::dot(wh.row(j), a_dst);
                scores.push(kernels::leaky_relu(p_i + q_j, LEAKY_SLOPE));
            }
            let offsets = [0, deg];
            kernels::softmax_segments(&mut scores, &offsets);
            let row = out.row_mut(pos);
            for (alpha_e, e) in scores.iter().zip(g.offsets[i]..g.offsets[i + 1]) {
                let src = wh.row(g.neighbors[e]);
                for (dst, &v) in row.iter_mut().zip(src) {
                    *dst += alpha_e * v;
                }
            }
            if l + 1 < model.cfg.num_layers {
                for v in row.iter_mut() {
                    *v = kernels::elu(*v);
                }
            }
        }
        live = Some(out.clone());
        outputs.push(out);
    }
    Ok(outputs)
}

/// Largest singular value by power iteration on `M^T M`, seeded start vector.
pub fn spectral_norm(m: &Matrix, seed: u64) -> Result<f64> {
    const TOL: f64 = 1e-8;
    const MAX_ITERS: usize = 10_000;
    if m.rows == 0 || m.cols == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(
        seed,
        streams::POWER_ITER,
        m.rows as u64,
        m.cols as u64,
    ));
    let mut v: Vec<f64> = (0..m.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = kernels::norm2(&v);
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    let mut lambda_prev = 0.0;
    for it in 0..MAX_ITERS {
        let mv = kernels::matmul_nn(&m.data, &v, m.rows, m.cols, 1);
        let w = kernels::matmul_tn(&m.data, &mv, m.rows, m.cols, 1);
        let lambda = kernels::norm2(&w);
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let delta = (lambda - lambda_prev).abs();
        if delta <= TOL * lambda.max(1.0) && it > 0 {
            return Ok(lambda.sqrt());
        }
        lambda_prev = lambda;
        v = w.iter().map(|x| x / lambda).collect();
    }
    Err(Error::PowerIterDiverged {
        iters: MAX_ITERS,
        delta: f64::NAN,
    })
}

/// Per-layer Lipschitz-style constants of the attention operator.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LayerLipschitz {
    pub w_norm: f64,
    pub a_norm: f64,
    pub gamma_max: f64,
    pub sigma_max: f64,
    pub h_max: f64,
    pub l_alpha: f64,
    pub beta: f64,
}

pub fn max_centrality_sigmoid(cent: &Centrality) -> f64 {
    cent.c
        .iter()
        .map(|&c| kernels::sigmoid(c - cent.c_avg))
        .fold(0.0, f64::max)
}

/// `beta = ||W|| (1 + L_alpha H_max)` with
/// `L_alpha = 2 ||a|| ||W|| (1 + gamma_max sigma_max)`; the activation slope
/// contributes 1 (elu and identity are 1-Lipschitz).
pub fn layer_lipschitz(
    model: &Model,
    l: usize,
    h_max: f64,
    sigma_max: f64,
    seed: u64,
) -> Result<LayerLipschitz> {
    let lp = &model.layers[l];
    let w_norm = spectral_norm(&lp.w.value, seed)?;
    let a_norm = kernels::norm2(&lp.a.value.data);
    let gamma_max = model.gamma_max(l);
    let l_alpha = 2.0 * a_norm * w_norm * (1.0 + gamma_max * sigma_max);
    let beta = w_norm * (1.0 + l_alpha * h_max);
    Ok(LayerLipschitz {
        w_norm,
        a_norm,
        gamma_max,
        sigma_max,
        h_max,
        l_alpha,
        beta,
    })
}

/// Composite smoothness constant of the total objective: the task head is
/// 1-Lipschitz-smooth in the logits, the drift term adds `2 lambda`.
pub fn composite_lipschitz(betas: &[f64], lambda: f64) -> f64 {
    (1.0 + 2.0 * lambda) * betas.iter().product::<f64>()
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BoundRow {
    pub node: usize,
    pub error: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub violations: usize,
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub betas: Vec<f64>,
    /// Worst cache-vs-exact row distance per level.
    pub level_staleness: Vec<f64>,
    /// Spectral-norm distance between the cached and exact level input
    /// matrices; this is the staleness factor the bound multiplies.
    pub level_matrix_staleness: Vec<f64>,
}

/// Verifies the layerwise error bound on the current cache state: for each
/// batch node, the final-layer distance between the historical approximation
/// and the exact forward must not exceed
/// `sum_k (prod_{l>k} beta_l) |N(i)| ||A_i|| ||H_cache_k - H_exact_k||`
/// where the last factor is the spectral norm of the difference between the
/// cached and exact level-`k` input matrices. The derivation bounds the
/// substituted aggregation row `A_i (H_cache - H_exact)` by a vector–matrix
/// product inequality, so the staleness factor is an operator norm of the
/// whole difference matrix, not a per-neighborhood quantity.
/// Per-level true staleness against exact layer inputs: `result[l][j]` is the
/// distance between node `j`'s cached level-`l` row and the exact value that
/// layer `l` should consume. Level 0 holds immutable features, so its row is
/// identically zero.
fn level_diffs_from(
    store: &HistoryStore,
    exact: &[Matrix],
    num_layers: usize,
    num_nodes: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut level_diff = vec![vec![0.0; num_nodes]];
    for l in 1..num_layers {
        let cache = &store.level(l)?.h;
        let truth = &exact[l - 1];
        let diffs: Vec<f64> = (0..num_nodes)
            .map(|j| {
                let a = cache.row(j);
                let b = truth.row(j);
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        level_diff.push(diffs);
    }
    Ok(level_diff)
}

/// Measures the cache's true staleness: runs the exact forward and returns,
/// per store level and node, `‖cached row − exact row‖`. Level 0 is always
/// zero (features never go stale).
pub fn measure_staleness(
    model: &Model,
    g: &Graph,
    store: &HistoryStore,
) -> Result<Vec<Vec<f64>>> {
    let exact = full_batch_forward(model, g, &store.level(0)?.h)?;
    level_diffs_from(store, &exact, model.cfg.num_layers, g.num_nodes)
}

/// Per-layer Lipschitz estimates with the bound checker's conventions: the
/// hidden-magnitude cap is the larger of the cached and exact max input-row
/// norms for each layer.
fn layer_estimates_from(
    model: &Model,
    store: &HistoryStore,
    exact: &[Matrix],
    sigma_max: f64,
    seed: u64,
) -> Result<Vec<LayerLipschitz>> {
    let features = &store.level(0)?.h;
    let mut out = Vec::with_capacity(model.cfg.num_layers);
    for l in 0..model.cfg.num_layers {
        let cache_h_max = store.level(l)?.h.max_row_norm();
        let exact_h_max = if l == 0 {
            features.max_row_norm()
        } else {
            exact[l - 1].max_row_norm()
        };
        out.push(layer_lipschitz(
            model,
            l,
            cache_h_max.max(exact_h_max),
            sigma_max,
            seed,
        )?);
    }
    Ok(out)
}

/// Standalone per-layer Lipschitz estimates for the current model and cache
/// state (runs its own exact forward to size the hidden magnitudes).
pub fn lipschitz_estimates(
    model: &Model,
    g: &Graph,
    store: &HistoryStore,
    cent: &Centrality,
    seed: u64,
) -> Result<Vec<LayerLipschitz>> {
    let exact = full_batch_forward(model, g, &store.level(0)?.h)?;
    layer_estimates_from(
        model,
        store,
        &exact,
        max_centrality_sigmoid(cent),
        seed,
    )
}

pub fn verify_bound(
    model: &Model,
    g: &Graph,
    store: &HistoryStore,
    cent: &Centrality,
    in_batch: &[usize],
    seed: u64,
) -> Result<BoundReport> {
    let num_layers = model.cfg.num_layers;
    let features = &store.level(0)?.h;
    let exact = full_batch_forward(model, g, features)?;
    let subst = substitution_forward(model, g, store, in_batch)?;
    let level_diff = level_diffs_from(store, &exact, num_layers, g.num_nodes)?;
    let mut level_matrix_staleness = vec![0.0];
    for l in 1..num_layers {
        let cache = &store.level(l)?.h;
        let truth = &exact[l - 1];
        let diff = Matrix::from_vec(
            cache.rows,
            cache.cols,
            cache
                .data
                .iter()
                .zip(&truth.data)
                .map(|(a, b)| a - b)
                .collect(),
        );
        level_matrix_staleness.push(spectral_norm(&diff, seed)?);
    }

    // Shared constants.
    let sigma_max = max_centrality_sigmoid(cent);
    let adj = symmetric_normalize(g);
    let betas: Vec<f64> = layer_estimates_from(model, store, &exact, sigma_max, seed)?
        .iter()
        .map(|ll| ll.beta)
        .collect();

    let last = num_layers - 1;
    let mut rows = Vec::with_capacity(in_batch.len());
    let mut violations = 0;
    let mut ratios = Vec::new();
    for (pos, &i) in in_batch.iter().enumerate() {
        let error = {
            let a = subst[last].row(pos);
            let b = exact[last].row(i);
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let deg = g.degrees[i] as f64;
        let row_norm = {
            let mut s = 0.0;
            for e in g.offsets[i]..g.offsets[i + 1] {
                s += adj.weights[e] * adj.weights[e];
            }
            s.sqrt()
        };
        let mut bound = 0.0;
        for k in 0..num_layers {
            let amplify: f64 = betas[k + 1..].iter().product();
            bound += amplify * deg * row_norm * level_matrix_staleness[k];
        }
        if error > bound * (1.0 + 1e-9) + 1e-12 {
            violations += 1;
        }
        if bound > 0.0 {
            ratios.push(error / bound);
        }
        rows.push(BoundRow { node: i, error, bound });
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_ratio = ratios.last().copied().unwrap_or(0.0);
    let median_ratio = if ratios.is_empty() {
        0.0
    } else {
        ratios[ratios.len() / 2]
    };
    let level_staleness = level_diff
        .iter()
        .map(|d| d.iter().copied().fold(0.0, f64::max))
        .collect();
    Ok(BoundReport {
        rows,
        violations,
        max_ratio,
        median_ratio,
        betas,
        level_staleness,
        level_matrix_staleness,
    })
}

pub fn bound_csv(report: &BoundReport) -> String {
    let mut out = String::from("node,error,bound,ratio\n");
    for r in &report.rows {
        let ratio = if r.bound > 0.0 { r.error / r.bound } else { 0.0 };
        out.push_str(&format!("{},{},{},{}\n", r.node, r.error, r.bound, ratio));
    }
    out
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ConvergenceReport {
    pub steps: usize,
    pub mean_grad_sq: f64,
    pub loss_first: f64,
    pub loss_min: f64,
    pub noise_sq: f64,
    pub lipschitz: f64,
    pub lr: f64,
    /// Whether the step size satisfies `lr < 2 / L`.
    pub step_size_admissible: bool,
    pub rhs: f64,
    pub satisfied: bool,
}

/// Stationarity check: mean squared gradient norm against
/// `2 (f_0 - f_min) / (lr T (2 - lr L)) + lr L noise^2 / (2 - lr L)`.
pub fn convergence_stats(
    loss_history: &[f64],
    grad_sq_norms: &[f64],
    first_epoch_grads: &[Vec<f64>],
    lr: f64,
    lipschitz: f64,
) -> ConvergenceReport {
    let steps = grad_sq_norms.len();
    let mean_grad_sq = if steps == 0 {
        0.0
    } else {
        grad_sq_norms.iter().sum::<f64>() / steps as f64
    };
    let loss_first = loss_history.first().copied().unwrap_or(0.0);
    let loss_min = loss_history.iter().copied().fold(f64::INFINITY, f64::min);
    let loss_min = if loss_min.is_finite() { loss_min } else { 0.0 };
    let noise_sq = if first_epoch_grads.len() < 2 {
        0.0
    } else {
        let t = first_epoch_grads.len();
        let dim = first_epoch_grads[0].len();
        let mut mean = vec![0.0; dim];
        for g in first_epoch_grads {
            for (m, &v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        first_epoch_grads
            .iter()
            .map(|g| {
                g.iter()
                    .zip(&mean)
                    .map(|(&v, &m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / t as f64
    };
    let step_size_admissible = lipschitz > 0.0 && lr < 2.0 / lipschitz;
    let rhs = if step_size_admissible && steps > 0 {
        let denom = 2.0 - lr * lipschitz;
        2.0 * (loss_first - loss_min) / (lr * steps as f64 * denom)
            + lr * lipschitz * noise_sq / denom
    } else {
        f64::INFINITY
    };
    ConvergenceReport {
        steps,
        mean_grad_sq,
        loss_first,
        loss_min,
        noise_sq,
        lipschitz,
        lr,
        step_size_admissible,
        rhs,
        satisfied: mean_grad_sq <= rhs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{self, Partition};
    use crate::layer::{ForwardOpts, ModelConfig};
    use crate::tape::Tape;

    fn setup(augment: AugmentMode) -> (Graph, Model, Matrix) {
        // cycle plus distance-2 chords: degree 5 with self-loops, enough
        // neighborhood mass for the bound's aggregation factor
        let edges: Vec<(usize, usize)> = (0..8)
            .flat_map(|i| [(i, (i + 1) % 8), (i, (i + 2) % 8)])
            .collect();
        let g = Graph::from_edges(8, &edges).unwrap().with_self_loops();
        let feats = Matrix::from_vec(8, 3, (0..24).map(|i| ((i % 7) as f64) * 0.3 - 0.9).collect());
        let model = Model::new(
            ModelConfig {
                feat_dim: 3,
                hidden: 4,
                num_classes: 3,
                num_layers: 2,
                augment,
                penalty_enabled: true,
            },
            17,
        )
        .unwrap();
        (g, model, feats)
    }

    #[test]
    fn exact_forward_is_bit_identical_to_whole_graph_batch() {
        for augment in [AugmentMode::None, AugmentMode::Concat, AugmentMode::Sum] {
            let (g, model, feats) = setup(augment);
            let store = HistoryStore::new(&feats, &model.hidden_dims());
            let cent = graph::degree_centrality(&g);
            let part = Partition {
                num_clusters: 1,
                assignment: vec![0; 8],
            };
            let bc = graph::make_batch(&g, &part, &[0]).unwrap();
            let mut tape = Tape::new();
            let art = model
                .forward_batch(&mut tape, &store, &bc, &cent, &ForwardOpts::default())
                .unwrap();
            let exact = full_batch_forward(&model, &g, &feats).unwrap();
            assert_eq!(tape.value_matrix(art.layer_outputs[0]), exact[0], "{augment}");
            assert_eq!(tape.value_matrix(art.logits), exact[1], "{augment}");
        }
    }

    #[test]
    fn substitution_with_fresh_cache_equals_exact() {
        let (g, model, feats) = setup(AugmentMode::Concat);
        let mut store = HistoryStore::new(&feats, &model.hidden_dims());
        let exact = full_batch_forward(&model, &g, &feats).unwrap();
        store.begin_iteration();
        let all: Vec<usize> = (0..8).collect();
        store.push(1, &all, &exact[0]).unwrap();
        let batch = vec![1, 4, 6];
        let subst = substitution_forward(&model, &g, &store, &batch).unwrap();
        for (pos, &i) in batch.iter().enumerate() {
            assert_eq!(subst[1].row(pos), exact[1].row(i));
        }
        let cent = graph::degree_centrality(&g);
        let report = verify_bound(&model, &g, &store, &cent, &batch, 17).unwrap();
        assert_eq!(report.violations, 0);
        for r in &report.rows {
            assert_eq!(r.error, 0.0);
        }
    }

    #[test]
    fn bound_dominates_error_with_a_stale_cache() {
        let (g, model, feats) = setup(AugmentMode::None);
        let mut store = HistoryStore::new(&feats, &model.hidden_dims());
        let exact = full_batch_forward(&model, &g, &feats).unwrap();
        // cache = exact + perturbation
        let mut noisy = exact[0].clone();
        for (k, v) in noisy.data.iter_mut().enumerate() {
            *v += 0.05 * ((k as f64 * 0.7).sin());
        }
        store.begin_iteration();
        let all: Vec<usize> = (0..8).collect();
        store.push(1, &all, &noisy).unwrap();
        let cent = graph::degree_centrality(&g);
        let batch = vec![0, 2, 3, 7];
        let report = verify_bound(&model, &g, &store, &cent, &batch, 17).unwrap();
        assert_eq!(report.violations, 0, "rows {:?}", report.rows);
        assert!(report.rows.iter().any(|r| r.error > 0.0));
        assert!(report.max_ratio <= 1.0);
        assert!(report.level_staleness[1] > 0.0);
        let csv = bound_csv(&report);
        assert!(csv.starts_with("node,error,bound,ratio\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn spectral_norm_frozen_values() {
        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 2.0]);
        assert!((spectral_norm(&m, 0).unwrap() - 3.0).abs() < 1e-6);
        let v = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        assert!((spectral_norm(&v, 0).unwrap() - 14.0f64.sqrt()).abs() < 1e-6);
        let id = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!((spectral_norm(&id, 0).unwrap() - 1.0).abs() < 1e-6);
        let z = Matrix::zeros(3, 2);
        assert_eq!(spectral_norm(&z, 0).unwrap(), 0.0);
        // deterministic across calls
        let r = Matrix::from_vec(3, 3, (0..9).map(|i| (i as f64).cos()).collect());
        assert_eq!(spectral_norm(&r, 5).unwrap(), spectral_norm(&r, 5).unwrap());
    }

    #[test]
    fn convergence_report_frozen_case() {
        let report = convergence_stats(
            &[1.0, 0.6, 0.5],
            &[4.0, 1.0, 1.0],
            &[vec![1.0, 0.0], vec![1.0, 0.0]],
            0.1,
            1.0,
        );
        assert_eq!(report.steps, 3);
        assert!((report.mean_grad_sq - 2.0).abs() < 1e-15);
        assert_eq!(report.noise_sq, 0.0);
        assert!(report.step_size_admissible);
        let expected_rhs = 2.0 * 0.5 / (0.1 * 3.0 * 1.9);
        assert!((report.rhs - expected_rhs).abs() < 1e-12);
        assert!(!report.satisfied);

        let bad = convergence_stats(&[1.0], &[1.0], &[], 3.0, 1.0);
        assert!(!bad.step_size_admissible);
        assert!(bad.rhs.is_infinite());
    }

    #[test]
    fn composite_constant_scales_with_drift_weight() {
        assert!((composite_lipschitz(&[2.0, 3.0], 0.5) - 12.0).abs() < 1e-15);
        assert!((composite_lipschitz(&[2.0, 3.0], 0.0) - 6.0).abs() < 1e-15);
    }
}
