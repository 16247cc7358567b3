//! Attention message-passing layers with staleness counter-measures.
//!
//! Each layer attends separately over in-batch neighbors (live rows, their own
//! softmax) and out-of-batch neighbors (cached rows, their own softmax). Three
//! mechanisms temper trust in cached rows:
//! - score penalty: the out-of-batch attention score loses
//!   `gamma(t) * s_j * sigmoid(c_j - c_avg)`, with `gamma(t)` a learnable,
//!   epoch-decayed coefficient;
//! - staleness-augmented inputs: cached rows carry their staleness scalar,
//!   either as an extra `log(1+s)` column (concat) or as an added learned
//!   embedding `elu(s * w_s)` (sum);
//! - persistence eviction: rows refreshed too long ago contribute no message
//!   at any layer of the current step.
//!
//! Mechanism code paths are skipped entirely whenever every gathered staleness
//! score is zero, so a fresh cache is bit-identical to running with the
//! mechanisms disabled.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchContext, Centrality};
use crate::history::HistoryStore;
use crate::kernels;
use crate::tape::{Matrix, Parameter, Tape, Value};
use crate::{streams, subseed};

pub const LEAKY_SLOPE: f64 = 0.2;
const ATTN_INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    None,
    Concat,
    Sum,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMode::None),
            "concat" => Ok(AugmentMode::Concat),
            "sum" => Ok(AugmentMode::Sum),
            other => Err(Error::Config(format!(
                "unknown augment mode {other:?} (expected none|concat|sum)"
            ))),
        }
    }
}

impl std::fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AugmentMode::None => "none",
            AugmentMode::Concat => "concat",
            AugmentMode::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub num_layers: usize,
    pub augment: AugmentMode,
    /// Score-penalty mechanism switch.
    pub penalty_enabled: bool,
}

pub struct LayerParams {
    pub w: Parameter,
    /// Attention vector, stacked as [source-projection; neighbor-projection].
    pub a: Parameter,
    /// Raw penalty coefficient; the effective gamma is `softplus(beta_raw)/t`.
    pub beta_raw: Parameter,
    /// Staleness embedding for sum augmentation.
    pub w_s: Option<Parameter>,
}

/// softplus(x) = 1  at  x = ln(e - 1).
fn beta_raw_init() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

fn uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize, limit: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    m
}

impl LayerParams {
    fn new(seed: u64, l: usize, w_rows: usize, dim_in: usize, dim_out: usize, augment: AugmentMode) -> Self {
        let tensor_rng = |k: u64| ChaCha20Rng::seed_from_u64(subseed(seed, streams::PARAMS, l as u64, k));
        let glorot = (6.0 / (w_rows + dim_out) as f64).sqrt();
        let w = Parameter::new(
            format!("layer{l}.w"),
            uniform(&mut tensor_rng(0), w_rows, dim_out, glorot),
        );
        let a = Parameter::new(
            format!("layer{l}.a"),
            uniform(&mut tensor_rng(1), 2 * dim_out, 1, ATTN_INIT_RANGE),
        );
        let beta_raw = Parameter::new(format!("layer{l}.beta_raw"), Matrix::scalar(beta_raw_init()));
        let w_s = (augment == AugmentMode::Sum).then(|| {
            Parameter::new(
                format!("layer{l}.w_s"),
                uniform(&mut tensor_rng(2), 1, dim_in, ATTN_INIT_RANGE),
            )
        });
        LayerParams { w, a, beta_raw, w_s }
    }
}

/// Per-layer taped handles for one forward pass.
struct StagedLayer {
    w: Value,
    a: Value,
    beta_raw: Value,
    w_s: Option<Value>,
}

pub struct ForwardOpts<'a> {
    /// 1-indexed epoch driving the gamma decay.
    pub epoch_t: u64,
    /// Persistence eviction threshold; `None` disables eviction.
    pub g_thres: Option<u64>,
    /// Feature-dropout keep mask for the live layer-0 input rows (training
    /// only); `batch x feat_dim` with entries 0 or 1/(1-p).
    pub feature_mask: Option<&'a Matrix>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            epoch_t: 1,
            g_thres: None,
            feature_mask: None,
        }
    }
}

pub struct ForwardArtifacts {
    /// Staged parameter leaves, parallel to `Model::flat_params` order.
    pub staged: Vec<Value>,
    /// Final-layer output rows for the batch (logits).
    pub logits: Value,
    /// Output of every layer, `layer_outputs[last] == logits`.
    pub layer_outputs: Vec<Value>,
    /// Live input of each layer: `None` for layer 0 (raw features), otherwise
    /// the previous layer's output.
    pub live_inputs: Vec<Option<Value>>,
    /// Raw cached frontier rows consumed by each layer, gradable for the
    /// staleness criterion; `None` for layer 0 or when nothing was attended.
    pub frontier_leaves: Vec<Option<Value>>,
    /// Retention mask over `bc.frontier` after persistence eviction.
    pub keep: Vec<bool>,
    /// Retained frontier node ids, in frontier order.
    pub kept_frontier: Vec<usize>,
    /// Out-of-batch attention coefficients per layer (segmented by
    /// `out_offsets`), when attention ran.
    pub out_alphas: Vec<Option<Value>>,
    /// Per-target offsets into the retained out-of-batch edges.
    pub out_offsets: Rc<Vec<usize>>,
    /// Retained-frontier row index per retained out-of-batch edge.
    pub out_src: Rc<Vec<usize>>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub layers: Vec<LayerParams>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_layers == 0 {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if cfg.feat_dim == 0 || cfg.num_classes == 0 || (cfg.num_layers > 1 && cfg.hidden == 0) {
            return Err(Error::Config(format!(
                "bad dims: feat={} hidden={} classes={}",
                cfg.feat_dim, cfg.hidden, cfg.num_classes
            )));
        }
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let dim_in = if l == 0 { cfg.feat_dim } else { cfg.hidden };
            let dim_out = if l + 1 == cfg.num_layers {
                cfg.num_classes
            } else {
                cfg.hidden
            };
            let w_rows = dim_in + usize::from(cfg.augment == AugmentMode::Concat);
            layers.push(LayerParams::new(seed, l, w_rows, dim_in, dim_out, cfg.augment));
        }
        Ok(Model { cfg, layers })
    }

    pub fn dim_in(&self, l: usize) -> usize {
        if l == 0 {
            self.cfg.feat_dim
        } else {
            self.cfg.hidden
        }
    }

    pub fn dim_out(&self, l: usize) -> usize {
        if l + 1 == self.cfg.num_layers {
            self.cfg.num_classes
        } else {
            self.cfg.hidden
        }
    }

    /// Widths of history levels 1..L-1 (cached hidden states).
    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.cfg.hidden; self.cfg.num_layers - 1]
    }

    pub fn flat_params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for lp in &self.layers {
            out.push(&lp.w);
            out.push(&lp.a);
            out.push(&lp.beta_raw);
            if let Some(ws) = &lp.w_s {
                out.push(ws);
            }
        }
        out
    }

    pub fn flat_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for lp in &mut self.layers {
            out.push(&mut lp.w);
            out.push(&mut lp.a);
            out.push(&mut lp.beta_raw);
            if let Some(ws) = &mut lp.w_s {
                out.push(ws);
            }
        }
        out
    }

    /// Effective penalty coefficient of layer `l` at epoch `t`.
    pub fn gamma(&self, l: usize, epoch_t: u64) -> Result<f64> {
        if epoch_t == 0 {
            return Err(Error::EpochIndex { t: 0 });
        }
        Ok(kernels::softplus(self.layers[l].beta_raw.value.data[0]) / epoch_t as f64)
    }

    /// Largest penalty coefficient over the whole schedule (epoch 1).
    pub fn gamma_max(&self, l: usize) -> f64 {
        kernels::softplus(self.layers[l].beta_raw.value.data[0])
    }

    /// Batched forward pass over live and cached rows, on the tape.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &HistoryStore,
        bc: &BatchContext,
        cent: &Centrality,
        opts: &ForwardOpts,
    ) -> Result<ForwardArtifacts> {
        if opts.epoch_t == 0 {
            return Err(Error::EpochIndex { t: 0 });
        }
        if store.num_levels() != self.cfg.num_layers {
            return Err(Error::BadLevel {
                level: self.cfg.num_layers - 1,
                levels: store.num_levels(),
            });
        }
        let nb = bc.in_batch.len();
        let num_layers = self.cfg.num_layers;
        if let Some(m) = opts.feature_mask {
            if m.rows != nb || m.cols != self.dim_in(0) {
                return Err(Error::Shape {
                    op: "feature dropout mask".into(),
                    details: format!(
                        "got {}x{}, want {}x{}",
                        m.rows,
                        m.cols,
                        nb,
                        self.dim_in(0)
                    ),
                });
            }
        }

        // Persistence eviction: one decision per frontier node, applied to
        // every layer of this step.
        let keep = store.keep_mask(&bc.frontier, opts.g_thres)?;
        let mut newpos = vec![usize::MAX; bc.frontier.len()];
        let mut kept_frontier = Vec::new();
        for (p, &node) in bc.frontier.iter().enumerate() {
            if keep[p] {
                newpos[p] = kept_frontier.len();
                kept_frontier.push(node);
            }
        }
        let mut out_src = Vec::new();
        let mut out_tgt = Vec::new();
        let mut out_offsets = Vec::with_capacity(nb + 1);
        out_offsets.push(0);
        for i in 0..nb {
            for &p in &bc.out_edges[bc.out_offsets[i]..bc.out_offsets[i + 1]] {
                if keep[p] {
                    out_src.push(newpos[p]);
                    out_tgt.push(i);
                }
            }
            out_offsets.push(out_src.len());
        }
        let has_out = !out_src.is_empty();
        let out_src = Rc::new(out_src);
        let out_tgt = Rc::new(out_tgt);
        let out_offsets = Rc::new(out_offsets);

        let has_in = !bc.in_edges.is_empty();
        let in_src = Rc::new(bc.in_edges.clone());
        let in_offsets = Rc::new(bc.in_offsets.clone());
        let mut in_tgt = Vec::with_capacity(bc.in_edges.len());
        for i in 0..nb {
            for _ in bc.in_offsets[i]..bc.in_offsets[i + 1] {
                in_tgt.push(i);
            }
        }
        let in_tgt = Rc::new(in_tgt);

        // Stage every parameter so each one owns a gradable leaf, used or not.
        let mut staged = Vec::new();
        let mut staged_layers = Vec::with_capacity(num_layers);
        for lp in &self.layers {
            let w = tape.stage(&lp.w);
            let a = tape.stage(&lp.a);
            let beta_raw = tape.stage(&lp.beta_raw);
            staged.push(w);
            staged.push(a);
            staged.push(beta_raw);
            let w_s = lp.w_s.as_ref().map(|p| {
                let v = tape.stage(p);
                staged.push(v);
                v
            });
            staged_layers.push(StagedLayer { w, a, beta_raw, w_s });
        }

        let mut layer_outputs = Vec::with_capacity(num_layers);
        let mut live_inputs = Vec::with_capacity(num_layers);
        let mut frontier_leaves = Vec::with_capacity(num_layers);
        let mut out_alphas = Vec::with_capacity(num_layers);
        let mut prev_out: Option<Value> = None;

        for l in 0..num_layers {
            let dim_out = self.dim_out(l);
            let sl = &staged_layers[l];

            // Live in-batch input rows.
            let mut x_live = match prev_out {
                None => tape.constant(store.gather(0, &bc.in_batch)?.0),
                Some(v) => v,
            };
            live_inputs.push(prev_out);
            if l == 0 {
                if let Some(m) = opts.feature_mask {
                    let mask = tape.constant(m.clone());
                    x_live = tape.mul(x_live, mask)?;
                }
            }

            // Cached frontier input rows plus their staleness scores.
            let (fr_leaf, fr_s) = if has_out {
                let (fr_mat, fr_s) = store.gather(l, &kept_frontier)?;
                let leaf = if l == 0 {
                    tape.constant(fr_mat)
                } else {
                    tape.leaf(fr_mat)
                };
                (Some(leaf), fr_s)
            } else {
                (None, Vec::new())
            };
            frontier_leaves.push(if has_out && l > 0 { fr_leaf } else { None });
            let any_stale = fr_s.iter().any(|&v| v > 0.0);

            // Staleness augmentation of the layer inputs.
            let (x_in, x_out) = match self.cfg.augment {
                AugmentMode::None => (x_live, fr_leaf),
                AugmentMode::Concat => {
                    let zeros = tape.constant(Matrix::zeros(nb, 1));
                    let x_in = tape.concat_cols(x_live, zeros)?;
                    let x_out = match fr_leaf {
                        Some(fr) => {
                            let col = Matrix::from_vec(
                                fr_s.len(),
                                1,
                                fr_s.iter().map(|&s| s.ln_1p()).collect(),
                            );
                            let col = tape.constant(col);
                            Some(tape.concat_cols(fr, col)?)
                        }
                        None => None,
                    };
                    (x_in, x_out)
                }
                AugmentMode::Sum => {
                    let x_out = match fr_leaf {
                        Some(fr) if any_stale => {
                            let s_col =
                                tape.constant(Matrix::from_vec(fr_s.len(), 1, fr_s.clone()));
                            let w_s = sl.w_s.ok_or_else(|| Error::Config(
                                "sum augmentation without its embedding parameter".into(),
                            ))?;
                            let emb = tape.matmul(s_col, w_s)?;
                            let emb = tape.elu(emb);
                            Some(tape.add(fr, emb)?)
                        }
                        other => other,
                    };
                    (x_live, x_out)
                }
            };

            // Shared projections.
            let wh_in = tape.matmul(x_in, sl.w)?;
            let a_src = tape.slice_rows(sl.a, 0, dim_out)?;
            let a_dst = tape.slice_rows(sl.a, dim_out, dim_out)?;
            let p_in = tape.matmul(wh_in, a_src)?;
            let q_in = tape.matmul(wh_in, a_dst)?;

            // In-batch attention over live rows.
            let in_agg = if has_in {
                let p_t = tape.gather_rows(p_in, in_tgt.clone())?;
                let q_s = tape.gather_rows(q_in, in_src.clone())?;
                let scores = tape.add(p_t, q_s)?;
                let scores = tape.leaky_relu(scores, LEAKY_SLOPE);
                let alpha = tape.segmented_softmax(scores, in_offsets.clone())?;
                tape.attend(alpha, wh_in, in_src.clone(), in_offsets.clone())?
            } else {
                tape.constant(Matrix::zeros(nb, dim_out))
            };

            // Out-of-batch attention over cached rows, staleness-penalized.
            let (out_agg, alpha_out) = match x_out {
                Some(x_out) => {
                    let wh_out = tape.matmul(x_out, sl.w)?;
                    let q_out = tape.matmul(wh_out, a_dst)?;
                    let p_t = tape.gather_rows(p_in, out_tgt.clone())?;
                    let q_s = tape.gather_rows(q_out, out_src.clone())?;
                    let scores = tape.add(p_t, q_s)?;
                    let mut scores = tape.leaky_relu(scores, LEAKY_SLOPE);
                    if self.cfg.penalty_enabled && any_stale {
                        let base: Vec<f64> = out_src
                            .iter()
                            .map(|&sp| {
                                let node = kept_frontier[sp];
                                fr_s[sp] * kernels::sigmoid(cent.c[node] - cent.c_avg)
                            })
                            .collect();
                        let base = tape.constant(Matrix::from_vec(out_src.len(), 1, base));
                        let sp = tape.softplus(sl.beta_raw);
                        let gamma = tape.scale(sp, 1.0 / opts.epoch_t as f64);
                        let penalty = tape.scale_by_scalar(base, gamma)?;
                        scores = tape.sub(scores, penalty)?;
                    }
                    let alpha = tape.segmented_softmax(scores, out_offsets.clone())?;
                    let agg = tape.attend(alpha, wh_out, out_src.clone(), out_offsets.clone())?;
                    (Some(agg), Some(alpha))
                }
                None => (None, None),
            };
            out_alphas.push(alpha_out);

            let combined = match out_agg {
                Some(out_agg) => tape.add(in_agg, out_agg)?,
                None => in_agg,
            };
            let out = if l + 1 < num_layers {
                tape.elu(combined)
            } else {
                combined
            };
            layer_outputs.push(out);
            prev_out = Some(out);
        }

        Ok(ForwardArtifacts {
            staged,
            logits: *layer_outputs.last().unwrap(),
            layer_outputs,
            live_inputs,
            frontier_leaves,
            keep,
            kept_frontier,
            out_alphas,
            out_offsets,
            out_src,
        })
    }
}
