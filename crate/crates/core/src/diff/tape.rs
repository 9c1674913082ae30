//! Graph-recording reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node to the [`Tape`] and returns its [`NodeId`].
//! Parents always precede their children on the tape, so the recorded graph
//! is acyclic and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use posecluster::diff::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::rc::Rc;

use super::matrix::{gemm_acc, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule: given the upstream gradient, the input values
/// and the output value, return one gradient per input.
pub type BackwardFn = dyn Fn(&Matrix, &[&Matrix], &Matrix) -> Vec<Matrix>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogClamped(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    NormalizeRows(NodeId),
    SqDist(NodeId, NodeId),
    StudentT(NodeId),
    Custom(Vec<NodeId>, Rc<BackwardFn>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so gradients can be propagated back to its leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, or `None` when the root
    /// does not depend on it (or `id` is a constant).
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, name: &str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SqDist(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::LogClamped(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::NormalizeRows(a)
            | Op::StudentT(a) => vec![*a],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// Adds a `1×M` bias row to every row of an `N×M` matrix.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBias(x, bias), "add_row_bias")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + offset);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), "relu")
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let x = self.value(logits);
        if x.cols() == 0 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: x.shape(),
                rhs: (x.rows(), 1),
            });
        }
        let v = softmax_rows(x);
        self.push(v, Op::SoftmaxRows(logits), "softmax_rows")
    }

    /// `ln(max(x, floor))` elementwise; the gradient is zero where clamped.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::LogClamped(a, floor), "log_clamped")
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Evaluation("mean of an empty matrix".into()));
        }
        let v = Matrix::scalar(x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a), "mean")
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::NormalizeRows(a), "normalize_rows")
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (N×D)
    /// and the rows of `b` (K×D), giving an N×K matrix.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = pairwise_sq_dist(self.value(a), self.value(b))?;
        self.push(v, Op::SqDist(a, b), "sq_dist")
    }

    /// Student-t kernel with one degree of freedom: `1 / (1 + x)`.
    pub fn student_t(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + x));
        self.push(v, Op::StudentT(a), "student_t")
    }

    /// Records an operation with an arbitrary forward value and backward rule.
    pub fn custom(&mut self, inputs: &[NodeId], value: Matrix, backward: Rc<BackwardFn>) -> Result<NodeId> {
        self.push(value, Op::Custom(inputs.to_vec(), backward), "custom")
    }

    /// Propagates gradients from the scalar node `root` to every node it
    /// depends on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: root_value.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.route(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn route(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let acc = slot(grads, *a, val(*a));
                    gemm_acc(g, false, val(*b), true, acc);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, val(*b));
                    gemm_acc(val(*a), true, g, false, acc);
                }
            }
            Op::AddRowBias(x, bias) => {
                if wants(*x) {
                    slot(grads, *x, val(*x)).add_scaled(g, 1.0);
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, val(*bias));
                    for row in g.iter_rows() {
                        for (a, &v) in acc.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).add_scaled(g, 1.0);
                }
                if wants(*b) {
                    slot(grads, *b, val(*b)).add_scaled(g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).add_scaled(g, 1.0);
                }
                if wants(*b) {
                    slot(grads, *b, val(*b)).add_scaled(g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let gb = g.zip_map(val(*b), |x, y| x * y).expect("shape checked");
                    slot(grads, *a, val(*a)).add_scaled(&gb, 1.0);
                }
                if wants(*b) {
                    let ga = g.zip_map(val(*a), |x, y| x * y).expect("shape checked");
                    slot(grads, *b, val(*b)).add_scaled(&ga, 1.0);
                }
            }
            Op::Scale(a, factor) => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).add_scaled(g, *factor);
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).add_scaled(g, 1.0);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let acc = slot(grads, *a, x);
                    for ((d, &gv), &xv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let acc = slot(grads, *a, val(*a));
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in acc.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogClamped(a, floor) => {
                if wants(*a) {
                    let x = val(*a);
                    let acc = slot(grads, *a, x);
                    for ((d, &gv), &xv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if xv > *floor {
                            *d += gv / xv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let gv = g.item();
                    for d in slot(grads, *a, val(*a)).data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let gv = g.item() / x.len() as f64;
                    for d in slot(grads, *a, x).data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let sums = x.row_sums();
                    let acc = slot(grads, *a, x);
                    for (r, s) in sums.into_iter().enumerate() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, &gv) in acc.row_mut(r).iter_mut().zip(gr) {
                            *d += (gv - dot) / s;
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, av);
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let gij = 2.0 * g.get(i, j);
                            for ((d, &x), &c) in acc.row_mut(i).iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                                *d += gij * (x - c);
                            }
                        }
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bv);
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let gij = 2.0 * g.get(i, j);
                            for ((d, &x), &c) in acc.row_mut(j).iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                                *d += gij * (c - x);
                            }
                        }
                    }
                }
            }
            Op::StudentT(a) => {
                if wants(*a) {
                    let acc = slot(grads, *a, val(*a));
                    for ((d, &gv), &y) in acc.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d -= gv * y * y;
                    }
                }
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Matrix> = inputs.iter().map(|&i| val(i)).collect();
                let input_grads = rule(g, &values, out);
                for (&id, ig) in inputs.iter().zip(input_grads) {
                    if wants(id) {
                        slot(grads, id, val(id)).add_scaled(&ig, 1.0);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], id: NodeId, like: &Matrix) -> &'a mut Matrix {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// Row-wise stabilized softmax on a plain matrix.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Pairwise squared distances between rows of `a` and rows of `b`.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "sq_dist",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            let d: f64 = ai.iter().zip(b.row(j)).map(|(x, c)| (x - c) * (x - c)).sum();
            out.set(i, j, d);
        }
    }
    Ok(out)
}
