//! Historical embedding store.
//!
//! Level `l` caches the layer-`l` *input* rows for every node: level 0 holds
//! the raw features (always fresh, never written), level `l >= 1` holds the
//! last computed hidden state that layer `l` consumes. Each cached row carries
//! a staleness score (the gradient-norm criterion recorded the last time the
//! row took part in a backward pass) and the iteration stamp of its last
//! refresh; `current_iter - stamp` is the row's persistence.

use std::path::Path;

use crate::checkpoint::{self, Entry};
use crate::error::{Error, Result};
use crate::tape::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub h: Matrix,
    /// Gradient-norm staleness criterion per node; 0 until first recorded.
    pub s: Vec<f64>,
    /// Iteration of the last push (0 = initial content).
    pub last_update: Vec<u64>,
}

impl Level {
    fn new(h: Matrix) -> Self {
        let n = h.rows;
        Level {
            h,
            s: vec![0.0; n],
            last_update: vec![0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStore {
    levels: Vec<Level>,
    /// Iteration counter; `begin_iteration` makes the first step iteration 1.
    pub current_iter: u64,
}

impl HistoryStore {
    /// `hidden_dims[l-1]` is the width of level `l`; level 0 copies `features`.
    pub fn new(features: &Matrix, hidden_dims: &[usize]) -> Self {
        let n = features.rows;
        let mut levels = vec![Level::new(features.clone())];
        for &d in hidden_dims {
            levels.push(Level::new(Matrix::zeros(n, d)));
        }
        HistoryStore {
            levels,
            current_iter: 0,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.levels[0].h.rows
    }

    pub fn level(&self, level: usize) -> Result<&Level> {
        self.levels.get(level).ok_or(Error::BadLevel {
            level,
            levels: self.levels.len(),
        })
    }

    fn level_mut(&mut self, level: usize) -> Result<&mut Level> {
        let levels = self.levels.len();
        self.levels
            .get_mut(level)
            .ok_or(Error::BadLevel { level, levels })
    }

    /// Advances the iteration clock and returns the new iteration number.
    pub fn begin_iteration(&mut self) -> u64 {
        self.current_iter += 1;
        self.current_iter
    }

    /// Cached rows and staleness scores for `nodes`, in order.
    pub fn gather(&self, level: usize, nodes: &[usize]) -> Result<(Matrix, Vec<f64>)> {
        let lv = self.level(level)?;
        self.check_nodes(nodes, "gather")?;
        let dim = lv.h.cols;
        let mut h = Matrix::zeros(nodes.len(), dim);
        let mut s = Vec::with_capacity(nodes.len());
        for (r, &node) in nodes.iter().enumerate() {
            h.row_mut(r).copy_from_slice(lv.h.row(node));
            s.push(lv.s[node]);
        }
        Ok((h, s))
    }

    /// Iterations since the node's row at `level` was last refreshed. Level 0
    /// holds immutable input features that are never stale, so its persistence
    /// is defined as 0.
    pub fn persistence(&self, level: usize, node: usize) -> Result<u64> {
        let lv = self.level(level)?;
        self.check_nodes(&[node], "persistence")?;
        if level == 0 {
            return Ok(0);
        }
        Ok(self.current_iter.saturating_sub(lv.last_update[node]))
    }

    /// Per-node retention under the persistence threshold: a frontier node is
    /// dropped when its level-1 persistence strictly exceeds `g_thres`. With
    /// no threshold, or in a one-level store (no cached hidden state), every
    /// node is kept.
    pub fn keep_mask(&self, frontier: &[usize], g_thres: Option<u64>) -> Result<Vec<bool>> {
        self.check_nodes(frontier, "keep_mask")?;
        let Some(thres) = g_thres else {
            return Ok(vec![true; frontier.len()]);
        };
        if self.levels.len() < 2 {
            return Ok(vec![true; frontier.len()]);
        }
        frontier
            .iter()
            .map(|&j| Ok(self.persistence(1, j)? <= thres))
            .collect()
    }

    /// Overwrites cached rows with freshly computed values and stamps them
    /// with the current iteration. Level 0 is the immutable feature level.
    pub fn push(&mut self, level: usize, nodes: &[usize], values: &Matrix) -> Result<()> {
        if level == 0 {
            return Err(Error::PushLevelZero);
        }
        self.check_nodes(nodes, "push")?;
        let iter = self.current_iter;
        let lv = self.level_mut(level)?;
        if values.rows != nodes.len() || values.cols != lv.h.cols {
            return Err(Error::Shape {
                op: "history push".into(),
                details: format!(
                    "got {}x{}, level {} wants {}x{}",
                    values.rows,
                    values.cols,
                    level,
                    nodes.len(),
                    lv.h.cols
                ),
            });
        }
        for (r, &node) in nodes.iter().enumerate() {
            if lv.last_update[node] > iter {
                return Err(Error::StalePush {
                    iter,
                    node,
                    stamped: lv.last_update[node],
                });
            }
            lv.h.row_mut(node).copy_from_slice(values.row(r));
            lv.last_update[node] = iter;
        }
        Ok(())
    }

    /// Records the gradient-norm staleness criterion for `nodes`, overwriting
    /// whatever was there. Works on every level; level-0 scores exist only as
    /// diagnostics (level 0 itself never goes stale).
    pub fn record_grad_norms(&mut self, level: usize, nodes: &[usize], norms: &[f64]) -> Result<()> {
        self.check_nodes(nodes, "record_grad_norms")?;
        if nodes.len() != norms.len() {
            return Err(Error::CountMismatch {
                what: "gradient norms".into(),
                got: norms.len(),
                expected: nodes.len(),
            });
        }
        let lv = self.level_mut(level)?;
        for (&node, &v) in nodes.iter().zip(norms) {
            if !(v >= 0.0) {
                return Err(Error::NegativeStaleness { node, value: v });
            }
            lv.s[node] = v;
        }
        Ok(())
    }

    fn check_nodes(&self, nodes: &[usize], context: &str) -> Result<()> {
        let n = self.num_nodes();
        for &node in nodes {
            if node >= n {
                return Err(Error::NodeIdRange {
                    id: node,
                    num_nodes: n,
                    context: context.into(),
                });
            }
        }
        Ok(())
    }

    /// Snapshots levels >= 1 plus the iteration clock; level 0 is rebuilt from
    /// features on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.num_nodes();
        let mut entries = vec![Entry::new(
            "meta.current_iter",
            vec![1],
            vec![self.current_iter as f64],
        )];
        for (l, lv) in self.levels.iter().enumerate().skip(1) {
            entries.push(Entry::new(
                format!("level{l}.h"),
                vec![n, lv.h.cols],
                lv.h.data.clone(),
            ));
            entries.push(Entry::new(format!("level{l}.s"), vec![n], lv.s.clone()));
            entries.push(Entry::new(
                format!("level{l}.stamp"),
                vec![n],
                lv.last_update.iter().map(|&v| v as f64).collect(),
            ));
        }
        checkpoint::write_container(path, &entries)
    }

    pub fn load(path: &Path, features: &Matrix, hidden_dims: &[usize]) -> Result<Self> {
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let entries = checkpoint::read_container(path)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| corrupt(format!("missing entry {name:?}")))
        };
        let mut store = HistoryStore::new(features, hidden_dims);
        store.current_iter = find("meta.current_iter")?.values[0] as u64;
        let n = store.num_nodes();
        for l in 1..store.num_levels() {
            let dim = store.levels[l].h.cols;
            let h = find(&format!("level{l}.h"))?;
            if h.dims != [n, dim] {
                return Err(corrupt(format!(
                    "level {l}: stored dims {:?}, expected [{n}, {dim}]",
                    h.dims
                )));
            }
            store.levels[l].h.data.copy_from_slice(&h.values);
            let s = find(&format!("level{l}.s"))?;
            if s.values.len() != n {
                return Err(corrupt(format!("level {l}: staleness length mismatch")));
            }
            store.levels[l].s.copy_from_slice(&s.values);
            let stamp = find(&format!("level{l}.stamp"))?;
            if stamp.values.len() != n {
                return Err(corrupt(format!("level {l}: stamp length mismatch")));
            }
            for (dst, &v) in store.levels[l].last_update.iter_mut().zip(&stamp.values) {
                *dst = v as u64;
            }
        }
        let expected = 1 + 3 * (store.num_levels() - 1);
        if entries.len() != expected {
            return Err(corrupt(format!(
                "{} entries, expected {expected}",
                entries.len()
            )));
        }
        Ok(store)
    }
}
