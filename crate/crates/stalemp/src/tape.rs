//! Define-by-run reverse-mode autodiff over 2-D `f64` tensors.
//!
//! A fresh tape is built every training step. Ops append nodes in construction
//! order, so the reverse scan in `backward` is a topological order that visits
//! each node exactly once and accumulates adjoints deterministically: two
//! backward passes over identical tapes produce bit-identical gradients.
//! Forward values go through the shared kernels in `crate::kernels`, which is
//! what keeps a whole-graph batched forward bit-identical to the no-tape oracle.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;

/// Dense row-major matrix. Scalars are 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| kernels::norm2(self.row(i)))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub grad_populated: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Parameter {
            name: name.into(),
            value,
            grad,
            grad_populated: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
        self.grad_populated = false;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.data.len());
        for (dst, src) in self.grad.data.iter_mut().zip(g) {
            *dst += src;
        }
        self.grad_populated = true;
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    Leaf,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    /// Matrix times a taped 1x1 scalar.
    ScaleByScalar(Value, Value),
    ConcatCols(Value, Value),
    SliceRows(Value, usize),
    LeakyRelu(Value, f64),
    Sigmoid(Value),
    Elu(Value),
    Softplus(Value),
    SegmentedSoftmax(Value, Rc<Vec<usize>>),
    Attend {
        alpha: Value,
        rows: Value,
        idx: Rc<Vec<usize>>,
        offsets: Rc<Vec<usize>>,
    },
    GatherRows(Value, Rc<Vec<usize>>),
    Sum(Value),
    CrossEntropy {
        logits: Value,
        labels: Rc<Vec<usize>>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    needs_grad: bool,
}

/// Gradient tape; rebuilt per step.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool) -> Value {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite values produced on tape"
        );
        self.nodes.push(Node {
            op,
            rows,
            cols,
            values,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn values(&self, v: Value) -> &[f64] {
        &self.node(v).values
    }

    pub fn value_matrix(&self, v: Value) -> Matrix {
        let n = self.node(v);
        Matrix::from_vec(n.rows, n.cols, n.values.clone())
    }

    /// Adjoint of `v` after `backward`; zeros for nodes off every parameter path.
    pub fn grad(&self, v: Value) -> &[f64] {
        assert!(self.backward_done, "grad read before backward");
        &self.grads[v.0]
    }

    /// Untracked input: receives no adjoint.
    pub fn constant(&mut self, m: Matrix) -> Value {
        self.push(Op::Leaf, m.rows, m.cols, m.data, false)
    }

    /// Tracked leaf for a parameter's current value.
    pub fn stage(&mut self, p: &Parameter) -> Value {
        self.push(Op::Leaf, p.value.rows, p.value.cols, p.value.data.clone(), true)
    }

    /// Tracked leaf from a raw matrix (finite-difference probes, tests).
    pub fn leaf(&mut self, m: Matrix) -> Value {
        self.push(Op::Leaf, m.rows, m.cols, m.data, true)
    }

    fn needs(&self, v: Value) -> bool {
        self.node(v).needs_grad
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul".into(),
                details: format!("{m}x{ka} * {kb}x{n}"),
            });
        }
        let values = kernels::matmul_nn(&self.node(a).values, &self.node(b).values, m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), m, n, values, ng))
    }

    fn binary_same_shape(&mut self, opname: &str, a: Value, b: Value) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: opname.into(),
                details: format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape("add", a, b)?;
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), r, c, values, ng))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape("sub", a, b)?;
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), r, c, values, ng))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape("mul", a, b)?;
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), r, c, values, ng))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let (r, cc) = self.shape(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), r, cc, values, ng)
    }

    pub fn scale_by_scalar(&mut self, a: Value, s: Value) -> Result<Value> {
        let (sr, sc) = self.shape(s);
        if (sr, sc) != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by_scalar".into(),
                details: format!("scalar operand is {sr}x{sc}"),
            });
        }
        let sv = self.node(s).values[0];
        let (r, c) = self.shape(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x * sv).collect();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Op::ScaleByScalar(a, s), r, c, values, ng))
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols".into(),
                details: format!("{ra}x{ca} vs {rb}x{cb}"),
            });
        }
        let mut values = vec![0.0; ra * (ca + cb)];
        for i in 0..ra {
            values[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.node(a).values[i * ca..(i + 1) * ca]);
            values[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.node(b).values[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), ra, ca + cb, values, ng))
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows".into(),
                details: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let values = self.node(a).values[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Op::SliceRows(a, start), len, c, values, ng))
    }

    pub fn leaky_relu(&mut self, a: Value, slope: f64) -> Value {
        let (r, c) = self.shape(a);
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .map(|&x| kernels::leaky_relu(x, slope))
            .collect();
        let ng = self.needs(a);
        self.push(Op::LeakyRelu(a, slope), r, c, values, ng)
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| kernels::sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), r, c, values, ng)
    }

    pub fn elu(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| kernels::elu(x)).collect();
        let ng = self.needs(a);
        self.push(Op::Elu(a), r, c, values, ng)
    }

    pub fn softplus(&mut self, a: Value) -> Value {
        let (r, c) = self.shape(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| kernels::softplus(x)).collect();
        let ng = self.needs(a);
        self.push(Op::Softplus(a), r, c, values, ng)
    }

    /// Segment-wise softmax over a column vector of scores.
    /// `offsets` has one more entry than there are segments; empty segments are legal.
    pub fn segmented_softmax(&mut self, scores: Value, offsets: Rc<Vec<usize>>) -> Result<Value> {
        let (r, c) = self.shape(scores);
        if c != 1 {
            return Err(Error::Shape {
                op: "segmented_softmax".into(),
                details: format!("scores must be a column, got {r}x{c}"),
            });
        }
        if offsets.is_empty() || *offsets.last().unwrap() != r {
            return Err(Error::InvalidArg {
                op: "segmented_softmax".into(),
                details: "offsets must end at the score count".into(),
            });
        }
        let mut values = self.node(scores).values.clone();
        kernels::softmax_segments(&mut values, &offsets);
        let ng = self.needs(scores);
        Ok(self.push(Op::SegmentedSoftmax(scores, offsets), r, 1, values, ng))
    }

    /// Per-segment weighted row sum; `idx[e]` selects the source row of edge `e`.
    pub fn attend(
        &mut self,
        alpha: Value,
        rows: Value,
        idx: Rc<Vec<usize>>,
        offsets: Rc<Vec<usize>>,
    ) -> Result<Value> {
        let (ar, ac) = self.shape(alpha);
        let (rr, width) = self.shape(rows);
        if ac != 1 || ar != idx.len() {
            return Err(Error::Shape {
                op: "attend".into(),
                details: format!("alpha {ar}x{ac} vs {} edges", idx.len()),
            });
        }
        if offsets.is_empty() || *offsets.last().unwrap() != idx.len() {
            return Err(Error::InvalidArg {
                op: "attend".into(),
                details: "offsets must end at the edge count".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rr) {
            return Err(Error::InvalidArg {
                op: "attend".into(),
                details: format!("row index {bad} out of {rr}"),
            });
        }
        let values = kernels::attend(
            &self.node(alpha).values,
            &self.node(rows).values,
            &idx,
            &offsets,
            width,
        );
        let nseg = offsets.len() - 1;
        let ng = self.needs(alpha) || self.needs(rows);
        Ok(self.push(Op::Attend { alpha, rows, idx, offsets }, nseg, width, values, ng))
    }

    pub fn gather_rows(&mut self, a: Value, idx: Rc<Vec<usize>>) -> Result<Value> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArg {
                op: "gather_rows".into(),
                details: format!("row index {bad} out of {r}"),
            });
        }
        let values = kernels::gather_rows(&self.node(a).values, &idx, c);
        let rows = idx.len();
        let ng = self.needs(a);
        Ok(self.push(Op::GatherRows(a, idx), rows, c, values, ng))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let total: f64 = {
            let mut acc = 0.0;
            for v in &self.node(a).values {
                acc += v;
            }
            acc
        };
        let ng = self.needs(a);
        self.push(Op::Sum(a), 1, 1, vec![total], ng)
    }

    /// Mean negative log-softmax likelihood over every row of `logits`.
    pub fn cross_entropy(&mut self, logits: Value, labels: Rc<Vec<usize>>) -> Result<Value> {
        let (r, c) = self.shape(logits);
        if r == 0 || labels.is_empty() {
            return Err(Error::InvalidArg {
                op: "cross_entropy".into(),
                details: "empty label mask".into(),
            });
        }
        if labels.len() != r {
            return Err(Error::CountMismatch {
                what: "cross_entropy labels".into(),
                got: labels.len(),
                expected: r,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArg {
                op: "cross_entropy".into(),
                details: format!("label {bad} out of {c} classes"),
            });
        }
        let vals = &self.node(logits).values;
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &vals[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= r as f64;
        let ng = self.needs(logits);
        Ok(self.push(Op::CrossEntropy { logits, labels, probs }, 1, 1, vec![loss], ng))
    }

    /// Reverse accumulation from a scalar root. Visits every node once, newest
    /// first; adjoints land in `grad`. A second call without a fresh tape errors.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArg {
                op: "backward".into(),
                details: "backward already ran on this tape".into(),
            });
        }
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        self.grads[root.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Adjoint of this node is final once we reach it (reverse topological order).
            let d = std::mem::take(&mut self.grads[i]);
            self.propagate(i, &d);
            self.grads[i] = d;
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&mut self, i: usize, d: &[f64]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = cols;
                if self.needs(a) {
                    let da = kernels::matmul_nt(d, &self.nodes[b.0].values, m, n, k);
                    accumulate(&mut self.grads[a.0], &da);
                }
                if self.needs(b) {
                    let db = kernels::matmul_tn(&self.nodes[a.0].values, d, m, k, n);
                    accumulate(&mut self.grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accumulate(&mut self.grads[a.0], d);
                }
                if self.needs(b) {
                    accumulate(&mut self.grads[b.0], d);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accumulate(&mut self.grads[a.0], d);
                }
                if self.needs(b) {
                    for (g, dv) in self.grads[b.0].iter_mut().zip(d) {
                        *g -= dv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = &self.nodes[b.0].values;
                    let prod: Vec<f64> = d.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(&mut self.grads[a.0], &prod);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].values;
                    let prod: Vec<f64> = d.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut self.grads[b.0], &prod);
                }
            }
            Op::Scale(a, cnst) => {
                let (a, cnst) = (*a, *cnst);
                if self.needs(a) {
                    for (g, dv) in self.grads[a.0].iter_mut().zip(d) {
                        *g += cnst * dv;
                    }
                }
            }
            Op::ScaleByScalar(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s.0].values[0];
                if self.needs(a) {
                    for (g, dv) in self.grads[a.0].iter_mut().zip(d) {
                        *g += sv * dv;
                    }
                }
                if self.needs(s) {
                    let av = &self.nodes[a.0].values;
                    let mut acc = 0.0;
                    for (dv, x) in d.iter().zip(av) {
                        acc += dv * x;
                    }
                    self.grads[s.0][0] += acc;
                }
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a.0].cols;
                let cb = self.nodes[b.0].cols;
                if self.needs(a) {
                    for i in 0..rows {
                        let src = &d[i * cols..i * cols + ca];
                        let dst = &mut self.grads[a.0][i * ca..(i + 1) * ca];
                        for (g, dv) in dst.iter_mut().zip(src) {
                            *g += dv;
                        }
                    }
                }
                if self.needs(b) {
                    for i in 0..rows {
                        let src = &d[i * cols + ca..(i + 1) * cols];
                        let dst = &mut self.grads[b.0][i * cb..(i + 1) * cb];
                        for (g, dv) in dst.iter_mut().zip(src) {
                            *g += dv;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                if self.needs(a) {
                    let dst = &mut self.grads[a.0][start * cols..(start + rows) * cols];
                    for (g, dv) in dst.iter_mut().zip(d) {
                        *g += dv;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                if self.needs(a) {
                    let av: Vec<f64> = self.nodes[a.0].values.clone();
                    for ((g, dv), x) in self.grads[a.0].iter_mut().zip(d).zip(&av) {
                        *g += dv * kernels::leaky_relu_grad(*x, slope);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if self.needs(a) {
                    let yv: Vec<f64> = self.nodes[i].values.clone();
                    for ((g, dv), y) in self.grads[a.0].iter_mut().zip(d).zip(&yv) {
                        *g += dv * y * (1.0 - y);
                    }
                }
            }
            Op::Elu(a) => {
                let a = *a;
                if self.needs(a) {
                    let xv: Vec<f64> = self.nodes[a.0].values.clone();
                    for ((g, dv), x) in self.grads[a.0].iter_mut().zip(d).zip(&xv) {
                        *g += dv * kernels::elu_grad(*x);
                    }
                }
            }
            Op::Softplus(a) => {
                let a = *a;
                if self.needs(a) {
                    let xv: Vec<f64> = self.nodes[a.0].values.clone();
                    for ((g, dv), x) in self.grads[a.0].iter_mut().zip(d).zip(&xv) {
                        *g += dv * kernels::sigmoid(*x);
                    }
                }
            }
            Op::SegmentedSoftmax(scores, offsets) => {
                let scores = *scores;
                let offsets = Rc::clone(offsets);
                if self.needs(scores) {
                    let alpha: Vec<f64> = self.nodes[i].values.clone();
                    let g = &mut self.grads[scores.0];
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let mut sdot = 0.0;
                        for e in lo..hi {
                            sdot += alpha[e] * d[e];
                        }
                        for e in lo..hi {
                            g[e] += alpha[e] * (d[e] - sdot);
                        }
                    }
                }
            }
            Op::Attend { alpha, rows: rws, idx, offsets } => {
                let (alpha, rws) = (*alpha, *rws);
                let idx = Rc::clone(idx);
                let offsets = Rc::clone(offsets);
                let width = cols;
                if self.needs(alpha) {
                    let rv: Vec<f64> = self.nodes[rws.0].values.clone();
                    let g = &mut self.grads[alpha.0];
                    for s in 0..offsets.len() - 1 {
                        let drow = &d[s * width..(s + 1) * width];
                        for e in offsets[s]..offsets[s + 1] {
                            let rrow = &rv[idx[e] * width..(idx[e] + 1) * width];
                            g[e] += kernels::dot(drow, rrow);
                        }
                    }
                }
                if self.needs(rws) {
                    let av: Vec<f64> = self.nodes[alpha.0].values.clone();
                    let g = &mut self.grads[rws.0];
                    for s in 0..offsets.len() - 1 {
                        let drow = &d[s * width..(s + 1) * width];
                        for e in offsets[s]..offsets[s + 1] {
                            let w = av[e];
                            let dst = &mut g[idx[e] * width..(idx[e] + 1) * width];
                            for (gd, dv) in dst.iter_mut().zip(drow) {
                                *gd += w * dv;
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = Rc::clone(idx);
                if self.needs(a) {
                    let g = &mut self.grads[a.0];
                    for (i_out, &src) in idx.iter().enumerate() {
                        let drow = &d[i_out * cols..(i_out + 1) * cols];
                        let dst = &mut g[src * cols..(src + 1) * cols];
                        for (gd, dv) in dst.iter_mut().zip(drow) {
                            *gd += dv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.needs(a) {
                    let dv = d[0];
                    for g in self.grads[a.0].iter_mut() {
                        *g += dv;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let labels = Rc::clone(labels);
                let probs: Vec<f64> = probs.clone();
                if self.needs(logits) {
                    let scale = d[0] / labels.len() as f64;
                    let (_, c) = self.shape(logits);
                    let g = &mut self.grads[logits.0];
                    for (i_row, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == lab { 1.0 } else { 0.0 };
                            g[i_row * c + j] += scale * (probs[i_row * c + j] - ind);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (g, v) in dst.iter_mut().zip(src) {
        *g += v;
    }
}

/// Result of a finite-difference sweep over every parameter coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Central finite differences against the tape's analytic gradients.
///
/// `f` rebuilds the scalar loss from staged parameter values on a fresh tape;
/// it must be deterministic. Relative error uses a unit floor:
/// |analytic - fd| / max(1, |analytic|, |fd|).
pub fn grad_check<F>(params: &mut [Parameter], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    let eval = |params: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let staged: Vec<Value> = params.iter().map(|p| tape.stage(p)).collect();
        let root = f(&mut tape, &staged)?;
        let (r, c) = tape.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        Ok(tape.values(root)[0])
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let staged: Vec<Value> = params.iter().map(|p| tape.stage(p)).collect();
    let root = f(&mut tape, &staged)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = staged.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].value.data.len() {
            let orig = params[pi].value.data[ci];
            params[pi].value.data[ci] = orig + h;
            let fplus = eval(params)?;
            params[pi].value.data[ci] = orig - h;
            let fminus = eval(params)?;
            params[pi].value.data[ci] = orig;
            let fd = (fplus - fminus) / (2.0 * h);
            let a = analytic[pi][ci];
            let rel = (a - fd).abs() / f64::max(1.0, f64::max(a.abs(), fd.abs()));
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params[pi].name.clone(), ci));
            }
        }
    }
    Ok(report)
}
