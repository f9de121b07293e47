//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Values are stored behind `Arc` so that
//! parameter leaves alias the store instead of copying the matrices.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry;

use super::mat::{Mat, SharedMat};
use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param {
        index: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Row vector broadcast-added to every row of the first input.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a^T * b`.
    MatMulTN(NodeId, NodeId),
    /// `a * b^T`.
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax normalizing each column to sum to one.
    SoftmaxCols(NodeId),
    /// Column-wise max over rows; `argmax[j]` is the winning row of column
    /// `j`, ties resolved toward the lower row at forward time.
    MaxPoolRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    /// Symmetric Chamfer distance from the input rows (n x 3 points) to a
    /// fixed target set. Nearest neighbors are resolved at forward time.
    ChamferVsFixed {
        x: NodeId,
        target: Arc<Vec<[f64; 3]>>,
        fwd_nn: Vec<usize>,
        bwd_nn: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: SharedMat,
}

/// Per-parameter gradients aligned with a [`ParamStore`] by index.
///
/// `None` means the parameter never reached the loss, which reads as a zero
/// gradient everywhere it matters.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros(num_params: usize) -> Gradients {
        Gradients {
            grads: (0..num_params).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Mat> {
        self.grads[index].as_ref()
    }

    pub fn entry(&self, index: usize, i: usize, j: usize) -> f64 {
        self.grads[index].as_ref().map_or(0.0, |m| m[(i, j)])
    }

    pub fn set(&mut self, index: usize, g: Mat) {
        self.grads[index] = Some(g);
    }

    fn add_into(&mut self, index: usize, g: &Mat) {
        match &mut self.grads[index] {
            Some(m) => m.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Accumulate another gradient set; used to fold per-sample gradients in
    /// sample order.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.len(), other.len(), "gradient sets differ in size");
        for (index, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_into(index, g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::is_finite)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.push_shared(op, Arc::new(value))
    }

    fn push_shared(&mut self, op: Op, value: SharedMat) -> NodeId {
        assert!(!self.consumed, "tape already differentiated");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_shared(&mut self, value: SharedMat) -> NodeId {
        self.push_shared(Op::Const, value)
    }

    /// Leaf aliasing parameter `index` of the store; gradients flow here.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        let value = store.mat(index).clone();
        self.push_shared(Op::Param { index }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), value)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        self.push(Op::Hadamard(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let value = self.value(x).add_row(self.value(row));
        self.push(Op::AddRow(x, row), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul_tn(self.value(b));
        self.push(Op::MatMulTN(a, b), value)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    /// Column-stochastic softmax; each column of the result sums to one.
    pub fn softmax_cols(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut out = Mat::zeros(rows, cols);
        for j in 0..cols {
            let mut max = f64::NEG_INFINITY;
            for i in 0..rows {
                max = max.max(v[(i, j)]);
            }
            let mut sum = 0.0;
            for i in 0..rows {
                let e = (v[(i, j)] - max).exp();
                out[(i, j)] = e;
                sum += e;
            }
            for i in 0..rows {
                out[(i, j)] /= sum;
            }
        }
        self.push(Op::SoftmaxCols(x), out)
    }

    /// 1 x cols row of column maxima; ties pick the lower row.
    pub fn max_pool_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        assert!(rows > 0, "max pool over zero rows");
        let mut out = Mat::zeros(1, cols);
        let mut argmax = vec![0usize; cols];
        for j in 0..cols {
            let mut best = v[(0, j)];
            let mut best_i = 0;
            for i in 1..rows {
                if v[(i, j)] > best {
                    best = v[(i, j)];
                    best_i = i;
                }
            }
            out[(0, j)] = best;
            argmax[j] = best_i;
        }
        self.push(Op::MaxPoolRows { x, argmax }, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[at..at + v.cols()].copy_from_slice(v.row(i));
            }
            at += v.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(x);
        assert!(start + width <= v.cols(), "column slice out of range");
        let mut out = Mat::zeros(v.rows(), width);
        for i in 0..v.rows() {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + width]);
        }
        self.push(Op::SliceCols { x, start }, out)
    }

    /// Reinterpret the value with a new shape, keeping row-major order.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.rows() * v.cols(), rows * cols, "reshape changes size");
        let value = Mat::from_vec(rows, cols, v.data().to_vec());
        self.push(Op::Reshape(x), value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Mat::from_vec(1, 1, vec![self.value(x).sum()]);
        self.push(Op::SumAll(x), value)
    }

    /// Symmetric Chamfer distance between the input points (n x 3) and a
    /// fixed target set, as a 1 x 1 node. Both directions use the unsquared
    /// Euclidean norm and mean over their source set.
    pub fn chamfer_vs_fixed(&mut self, x: NodeId, target: Arc<Vec<[f64; 3]>>) -> Result<NodeId> {
        let v = self.value(x);
        assert_eq!(v.cols(), 3, "chamfer input must be n x 3 points");
        if v.rows() == 0 || target.is_empty() {
            return Err(Error::invalid("Chamfer distance needs non-empty sets"));
        }
        let pts = v.to_points();
        let fwd_nn: Vec<usize> = pts.iter().map(|p| nearest(*p, &target)).collect();
        let bwd_nn: Vec<usize> = target.iter().map(|t| nearest(*t, &pts)).collect();
        let fwd: f64 = pts
            .iter()
            .zip(&fwd_nn)
            .map(|(p, &j)| geometry::dist2(*p, target[j]).sqrt())
            .sum::<f64>()
            / pts.len() as f64;
        let bwd: f64 = target
            .iter()
            .zip(&bwd_nn)
            .map(|(t, &i)| geometry::dist2(*t, pts[i]).sqrt())
            .sum::<f64>()
            / target.len() as f64;
        let value = Mat::from_vec(1, 1, vec![fwd + bwd]);
        Ok(self.push(
            Op::ChamferVsFixed {
                x,
                target,
                fwd_nn,
                bwd_nn,
            },
            value,
        ))
    }

    /// One LSTM step with gate order (input, forget, cell, output) packed
    /// along the columns of `wx`, `wh`, and `bias`. Returns the new hidden
    /// and cell states.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        wx: NodeId,
        wh: NodeId,
        bias: NodeId,
        hidden: usize,
    ) -> (NodeId, NodeId) {
        let zx = self.matmul(x, wx);
        let zh = self.matmul(h, wh);
        let z0 = self.add(zx, zh);
        let z = self.add(z0, bias);
        assert_eq!(self.shape(z).1, 4 * hidden, "packed gate width mismatch");
        let si = self.slice_cols(z, 0, hidden);
        let sf = self.slice_cols(z, hidden, hidden);
        let sg = self.slice_cols(z, 2 * hidden, hidden);
        let so = self.slice_cols(z, 3 * hidden, hidden);
        let i = self.sigmoid(si);
        let f = self.sigmoid(sf);
        let g = self.tanh(sg);
        let o = self.sigmoid(so);
        let fc = self.hadamard(f, c);
        let ig = self.hadamard(i, g);
        let c_next = self.add(fc, ig);
        let tc = self.tanh(c_next);
        let h_next = self.hadamard(o, tc);
        (h_next, c_next)
    }

    /// Reverse pass from a scalar root. Consumes the tape's ability to run
    /// again; values stay readable.
    pub fn backward(&mut self, root: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        self.consumed = true;
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");

        let mut adjoints: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut grads = Gradients::zeros(store.len());

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param { index } => grads.add_into(*index, &g),
                Op::Add(a, b) => {
                    acc(&mut adjoints, *a, g.clone());
                    acc(&mut adjoints, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adjoints, *a, g.clone());
                    acc(&mut adjoints, *b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b));
                    let gb = g.hadamard(self.value(*a));
                    acc(&mut adjoints, *a, ga);
                    acc(&mut adjoints, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut adjoints, *a, g.scale(*s)),
                Op::AddRow(x, row) => {
                    acc(&mut adjoints, *row, g.sum_rows());
                    acc(&mut adjoints, *x, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut adjoints, *a, ga);
                    acc(&mut adjoints, *b, gb);
                }
                Op::MatMulTN(a, b) => {
                    let ga = self.value(*b).matmul_nt(&g);
                    let gb = self.value(*a).matmul(&g);
                    acc(&mut adjoints, *a, ga);
                    acc(&mut adjoints, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    acc(&mut adjoints, *a, ga);
                    acc(&mut adjoints, *b, gb);
                }
                Op::Relu(x) => {
                    // Subgradient 0 at the kink; the input decides the mask.
                    let xv = self.value(*x);
                    let gx = g.zip(xv, |gv, v| if v > 0.0 { gv } else { 0.0 });
                    acc(&mut adjoints, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &*self.nodes[id].value;
                    let gx = g.zip(y, |gv, yv| gv * yv * (1.0 - yv));
                    acc(&mut adjoints, *x, gx);
                }
                Op::Tanh(x) => {
                    let y = &*self.nodes[id].value;
                    let gx = g.zip(y, |gv, yv| gv * (1.0 - yv * yv));
                    acc(&mut adjoints, *x, gx);
                }
                Op::SoftmaxCols(x) => {
                    let y = &*self.nodes[id].value;
                    let (rows, cols) = y.shape();
                    let mut gx = Mat::zeros(rows, cols);
                    for j in 0..cols {
                        let mut dot = 0.0;
                        for i in 0..rows {
                            dot += y[(i, j)] * g[(i, j)];
                        }
                        for i in 0..rows {
                            gx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    acc(&mut adjoints, *x, gx);
                }
                Op::MaxPoolRows { x, argmax } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Mat::zeros(rows, cols);
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[(i, j)] += g[(0, j)];
                    }
                    acc(&mut adjoints, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (rows, w) = self.shape(p);
                        let mut gp = Mat::zeros(rows, w);
                        for i in 0..rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[at..at + w]);
                        }
                        at += w;
                        acc(&mut adjoints, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (h, cols) = self.shape(p);
                        let mut gp = Mat::zeros(h, cols);
                        for i in 0..h {
                            gp.row_mut(i).copy_from_slice(g.row(at + i));
                        }
                        at += h;
                        acc(&mut adjoints, p, gp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let w = g.cols();
                    let mut gx = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        gx.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    acc(&mut adjoints, *x, gx);
                }
                Op::Reshape(x) => {
                    let (rows, cols) = self.shape(*x);
                    let gx = Mat::from_vec(rows, cols, g.data().to_vec());
                    acc(&mut adjoints, *x, gx);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.shape(*x);
                    let s = g[(0, 0)];
                    let gx = Mat::from_vec(rows, cols, vec![s; rows * cols]);
                    acc(&mut adjoints, *x, gx);
                }
                Op::ChamferVsFixed {
                    x,
                    target,
                    fwd_nn,
                    bwd_nn,
                } => {
                    let pts = self.value(*x).to_points();
                    let s = g[(0, 0)];
                    let mut gx = Mat::zeros(pts.len(), 3);
                    let wf = s / pts.len() as f64;
                    for (i, (p, &j)) in pts.iter().zip(fwd_nn).enumerate() {
                        let t = target[j];
                        let d = geometry::dist2(*p, t).sqrt();
                        if d > 0.0 {
                            for k in 0..3 {
                                gx[(i, k)] += wf * (p[k] - t[k]) / d;
                            }
                        }
                    }
                    let wb = s / target.len() as f64;
                    for (t, &i) in target.iter().zip(bwd_nn) {
                        let p = pts[i];
                        let d = geometry::dist2(*t, p).sqrt();
                        if d > 0.0 {
                            for k in 0..3 {
                                gx[(i, k)] += wb * (p[k] - t[k]) / d;
                            }
                        }
                    }
                    acc(&mut adjoints, *x, gx);
                }
            }
        }
        Ok(grads)
    }
}

fn acc(adjoints: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut adjoints[id.0] {
        Some(m) => m.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn nearest(p: [f64; 3], set: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in set.iter().enumerate() {
        let d = geometry::dist2(p, *q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
