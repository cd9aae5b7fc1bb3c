//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every batch. Leaves are either constants or
//! parameters; every op appends a node whose inputs already exist, so the
//! node list is a topological order and [`Graph::backward`] is a single
//! reverse sweep over it.

use crate::autodiff::kernels::{dot, gemm, norm};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Added to each vector norm before dividing in `cosine_sim` and `normalize`.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the graph.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    SumRows(Var),
    L2Norm(Var),
    Normalize(Var),
    CosineSim(Var, Var),
    SquaredDiff(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | CosineSim(a, b)
            | SquaredDiff(a, b) => vec![*a, *b],
            Concat(vs) => vs.clone(),
            Scale(a, _)
            | AddScalar(a, _)
            | SliceCols(a, _, _)
            | Reshape(a)
            | GatherRows(a, _)
            | Relu(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Softplus(a)
            | Log(a)
            | Mean(a)
            | Sum(a)
            | SumRows(a)
            | L2Norm(a)
            | Normalize(a)
            | CrossEntropy(a, _) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(like.shape()),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inputs of node `v`, in the order the op received them.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        let value = Tensor::new(vec![r, c], t.into_data()).expect("reshape preserves numel");
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Checks that `b` is the same shape as `a` or a `[1, cols]` row to
    /// broadcast over `a`'s rows.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.dims2(), tb.dims2());
        if da == db {
            Ok(false)
        } else if db.0 == 1 && db.1 == da.1 {
            Ok(true)
        } else {
            Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(ta), shape_str(tb)),
            ))
        }
    }

    fn zip_rows(&self, a: Var, b: Var, bcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let rb = if bcast { tb.row_slice(0) } else { tb.row_slice(i) };
            out.extend(ta.row_slice(i).iter().zip(rb).map(|(&x, &y)| f(x, y)));
        }
        Tensor::matrix(r, c, out).expect("shape preserved")
    }

    /// Elementwise sum; `b` may be a `[1, cols]` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_check("add", a, b)?;
        let value = self.zip_rows(a, b, bcast, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_check("sub", a, b)?;
        let value = self.zip_rows(a, b, bcast, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_check("mul", a, b)?;
        let value = self.zip_rows(a, b, bcast, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(op, value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    /// Concatenates along the last axis; all inputs need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                let shapes: Vec<_> = parts.iter().map(|v| shape_str(self.value(*v))).collect();
                return Err(Error::dim("concat", shapes.join(" ++ ")));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start > end || end > c {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{end} of {}", shape_str(ta)),
            ));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&ta.row_slice(i)[start..end]);
        }
        let value = Tensor::matrix(r, end - start, out)?;
        Ok(self.push(Op::SliceCols(a, start, end), value))
    }

    /// Same data viewed as `[rows, cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        if rows * cols != ta.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{} to [{rows}, {cols}]", shape_str(ta)),
            ));
        }
        let value = Tensor::matrix(rows, cols, ta.data().to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Rows of `a` picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} of {}", shape_str(ta)),
            ));
        }
        let value = ta.select_rows(idx);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), value))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel().max(1) as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Per-row sums, `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let rows = ta.rows();
        let out = (0..rows).map(|r| ta.row_slice(r).iter().sum()).collect();
        let value = Tensor::matrix(rows, 1, out).expect("shape");
        self.push(Op::SumRows(a), value)
    }

    /// Per-row L2 norms, `[rows, 1]`.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let rows = ta.rows();
        let out = (0..rows).map(|r| norm(ta.row_slice(r))).collect();
        let value = Tensor::matrix(rows, 1, out).expect("shape");
        self.push(Op::L2Norm(a), value)
    }

    /// Rescales each row to unit length: `x / (‖x‖ + NORM_EPS)`.
    pub fn normalize(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row_slice(i);
            let n = norm(row) + NORM_EPS;
            out.extend(row.iter().map(|x| x / n));
        }
        let value = Tensor::matrix(r, c, out).expect("shape");
        self.push(Op::Normalize(a), value)
    }

    /// Row-wise cosine similarity of two equal-shape inputs, `[rows, 1]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(Error::dim(
                "cosine_sim",
                format!("{} vs {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let rows = ta.rows();
        let out = (0..rows)
            .map(|r| {
                let (x, y) = (ta.row_slice(r), tb.row_slice(r));
                dot(x, y) / ((norm(x) + NORM_EPS) * (norm(y) + NORM_EPS))
            })
            .collect();
        let value = Tensor::matrix(rows, 1, out)?;
        Ok(self.push(Op::CosineSim(a, b), value))
    }

    /// Elementwise `(a - b)²`; `b` may be a broadcast row.
    pub fn squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_check("squared_diff", a, b)?;
        let value = self.zip_rows(a, b, bcast, |x, y| (x - y) * (x - y));
        Ok(self.push(Op::SquaredDiff(a, b), value))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.dims2();
        if targets.len() != r || targets.iter().any(|&y| y >= c) {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {}", targets.len(), shape_str(t)),
            ));
        }
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = t.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / r.max(1) as f64);
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), value))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let gd = g.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data_mut().iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    *slot = Some(Tensor::new(shape, contrib).expect("grad shape"));
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut ga, false);
                    acc(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut gb, false);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, gd.to_vec());
                if needs(*b) {
                    let gb = reduce_broadcast(g, val(*b), |gi, _| sign * gi, val(*a));
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bcast = ta.dims2() != tb.dims2();
                if needs(*a) {
                    let c = ta.cols();
                    let ga = gd
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let bi = if bcast { tb.data()[i % c] } else { tb.data()[i] };
                            gi * bi
                        })
                        .collect();
                    acc(*a, ga);
                }
                if needs(*b) {
                    let gb = reduce_broadcast(g, tb, |gi, i| gi * ta.data()[i], ta);
                    acc(*b, gb);
                }
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|x| c * x).collect()),
            Op::AddScalar(a, _) => acc(*a, gd.to_vec()),
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    if needs(*p) {
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + pc]);
                        }
                        acc(*p, gp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = val(*a).dims2();
                let w = end - start;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).dims2();
                let mut ga = vec![0.0; r * c];
                for (j, &src) in idx.iter().enumerate() {
                    for l in 0..c {
                        ga[src * c + l] += gd[j * c + l];
                    }
                }
                acc(*a, ga);
            }
            Op::Relu(a) => {
                // subgradient 0 at the kink
                let ga = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc(*a, ga);
            }
            Op::LeakyRelu(a, alpha) => {
                let ga = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { alpha * gi })
                    .collect();
                acc(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = gd
                    .iter()
                    .zip(out.data())
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect();
                acc(*a, ga);
            }
            Op::Softplus(a) => {
                let ga = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| gi * sigmoid(x))
                    .collect();
                acc(*a, ga);
            }
            Op::Log(a) => {
                let ga = gd.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect();
                acc(*a, ga);
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc(*a, vec![gd[0] / n.max(1) as f64; n]);
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).numel()]),
            Op::SumRows(a) => {
                let (r, c) = val(*a).dims2();
                let ga = (0..r * c).map(|i| gd[i / c]).collect();
                acc(*a, ga);
            }
            Op::L2Norm(a) => {
                let ta = val(*a);
                let (r, c) = ta.dims2();
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    let n = out.data()[i];
                    let row = ta.row_slice(i);
                    if n > 0.0 {
                        ga.extend(row.iter().map(|x| gd[i] * x / n));
                    } else {
                        ga.extend(std::iter::repeat_n(0.0, c));
                    }
                }
                acc(*a, ga);
            }
            Op::Normalize(a) => {
                let ta = val(*a);
                let (r, c) = ta.dims2();
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    let x = ta.row_slice(i);
                    let gi = &gd[i * c..(i + 1) * c];
                    let n = norm(x);
                    let u = n + NORM_EPS;
                    let proj = if n > 0.0 { dot(x, gi) / (u * u * n) } else { 0.0 };
                    ga.extend(x.iter().zip(gi).map(|(xv, gv)| gv / u - xv * proj));
                }
                acc(*a, ga);
            }
            Op::CosineSim(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, c) = ta.dims2();
                let mut ga = Vec::with_capacity(r * c);
                let mut gb = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (x, y) = (ta.row_slice(i), tb.row_slice(i));
                    let (nx, ny) = (norm(x), norm(y));
                    let (ux, uy) = (nx + NORM_EPS, ny + NORM_EPS);
                    let xy = dot(x, y);
                    let gi = gd[i];
                    let kx = if nx > 0.0 { xy / (ux * ux * uy * nx) } else { 0.0 };
                    let ky = if ny > 0.0 { xy / (ux * uy * uy * ny) } else { 0.0 };
                    ga.extend(x.iter().zip(y).map(|(xv, yv)| gi * (yv / (ux * uy) - kx * xv)));
                    gb.extend(x.iter().zip(y).map(|(xv, yv)| gi * (xv / (ux * uy) - ky * yv)));
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SquaredDiff(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bcast = ta.dims2() != tb.dims2();
                let c = ta.cols();
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x - if bcast { tb.data()[i % c] } else { tb.data()[i] })
                    .collect();
                if needs(*a) {
                    acc(*a, gd.iter().zip(&diff).map(|(gi, d)| 2.0 * gi * d).collect());
                }
                if needs(*b) {
                    let gb = reduce_broadcast(g, tb, |gi, i| -2.0 * gi * diff[i], ta);
                    acc(*b, gb);
                }
            }
            Op::CrossEntropy(a, targets) => {
                let ta = val(*a);
                let (r, c) = ta.dims2();
                let mut ga = Vec::with_capacity(r * c);
                let scale = gd[0] / r.max(1) as f64;
                for (i, &y) in targets.iter().enumerate() {
                    let row = ta.row_slice(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    ga.extend(row.iter().enumerate().map(|(j, v)| {
                        let p = (v - mx).exp() / z;
                        scale * (p - if j == y { 1.0 } else { 0.0 })
                    }));
                }
                acc(*a, ga);
            }
        }
    }
}

/// Folds an output-shaped gradient back onto `b`'s shape, summing over
/// rows when `b` was broadcast across `a`. `f(g_i, i)` maps each output
/// element before reduction.
fn reduce_broadcast(g: &Tensor, b: &Tensor, f: impl Fn(f64, usize) -> f64, a: &Tensor) -> Vec<f64> {
    let mapped = g.data().iter().enumerate().map(|(i, &gi)| f(gi, i));
    if a.dims2() == b.dims2() {
        mapped.collect()
    } else {
        let c = b.cols();
        let mut out = vec![0.0; c];
        for (i, v) in mapped.enumerate() {
            out[i % c] += v;
        }
        out
    }
}
