//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each node caches its forward
//! value; inputs always refer to earlier nodes, so the node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Leaves come in two flavours: [`Graph::input`] (tracked, receives a
//! gradient) and [`Graph::constant`] (untracked). Nodes that do not depend on
//! any tracked leaf are skipped during the backward sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rbf::{cross_sum, within_sum, RbfCoeffs};
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// `[m×k] · [k×n]`
    MatMul,
    Transpose,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Relu,
    Tanh,
    Square,
    Abs,
    Exp,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// `[m×n] + [n]`, adding the vector to every row.
    BroadcastAdd,
    /// Rows `start..end` of a matrix.
    SliceRows {
        start: usize,
        end: usize,
    },
    /// `[m×d], [n×d] → [m×n]` of squared Euclidean row distances.
    PairwiseSqDist,
    /// Sum of the off-diagonal entries of a square matrix, shape `[1]`.
    OffDiagSum,
    /// `[m×d], [m×d] → Σ_{i≠j} k(a_i, b_j)` for a Gaussian kernel sum `k`.
    /// When both inputs are the same node only `i < j` is visited.
    KernelOffDiagSum(RbfCoeffs),
    /// `act(x · Wᵀ + b)` for `x [m×k]`, `W [n×k]`, `b [n]`.
    Dense(Activation),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BroadcastAdd => "broadcast-add",
            OpKind::SliceRows { .. } => "slice-rows",
            OpKind::PairwiseSqDist => "pairwise-sq-dist",
            OpKind::OffDiagSum => "off-diag-sum",
            OpKind::KernelOffDiagSum(_) => "kernel-off-diag-sum",
            OpKind::Dense(_) => "dense",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::BroadcastAdd
            | OpKind::PairwiseSqDist
            | OpKind::KernelOffDiagSum(_) => 2,
            OpKind::Dense(_) => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Apply(OpKind, Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
    /// Forward by-products reused by the backward rule.
    aux: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for untracked nodes and nodes the root does not depend on.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when the root ignores it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err(kind: OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn need_matrix(kind: OpKind, a: &Tensor) -> Result<()> {
    if a.is_matrix() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{kind} needs a matrix operand, got shape {:?}",
            a.shape()
        )))
    }
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

    /// A tracked leaf; receives a gradient in [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// An untracked leaf (data, noise draws, prior samples).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            tracked,
            aux: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends one node computing `kind` over `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::invalid(format!(
                "{kind} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("{kind}: unknown node {}", bad.0)));
        }
        let (value, aux) = match kind {
            OpKind::KernelOffDiagSum(kernel) => {
                let same = inputs[0] == inputs[1];
                let (v, d) = kernel_pairs(kernel, self.value(inputs[0]), self.value(inputs[1]), same)?;
                (v, Some(d))
            }
            _ => (self.eval(kind, inputs)?, None),
        };
        if !value.data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("{kind} at node {}", self.nodes.len())));
        }
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        let id = self.push(Op::Apply(kind, inputs.to_vec()), value, tracked);
        if tracked {
            self.nodes[id.0].aux = aux;
        }
        Ok(id)
    }

    fn eval(&self, kind: OpKind, inputs: &[NodeId]) -> Result<Tensor> {
        let a = self.value(inputs[0]);
        let b = inputs.get(1).map(|&id| self.value(id));
        let out = match kind {
            OpKind::MatMul => {
                let b = b.expect("arity");
                if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
                    return Err(shape_err(kind, a, b));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                gemm(
                    Mat::new(a.data(), m, k, false),
                    Mat::new(b.data(), k, n, false),
                    &mut out,
                    false,
                );
                Tensor::from_parts(vec![m, n], out)
            }
            OpKind::Transpose => {
                need_matrix(kind, a)?;
                a.transpose()?
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = b.expect("arity");
                if a.shape() != b.shape() {
                    return Err(shape_err(kind, a, b));
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            OpKind::Scale(s) => a.map(|x| s * x),
            OpKind::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Tanh => a.map(f64::tanh),
            OpKind::Square => a.map(|x| x * x),
            OpKind::Abs => a.map(f64::abs),
            OpKind::Exp => a.map(f64::exp),
            OpKind::Sum => Tensor::from_parts(vec![1], vec![a.sum()]),
            OpKind::Mean => Tensor::from_parts(vec![1], vec![a.mean()]),
            OpKind::BroadcastAdd => {
                let b = b.expect("arity");
                if !a.is_matrix() || b.shape().len() != 1 || b.numel() != a.cols() {
                    return Err(shape_err(kind, a, b));
                }
                let c = a.cols();
                let mut data = a.data().to_vec();
                for row in data.chunks_exact_mut(c) {
                    for (x, &bias) in row.iter_mut().zip(b.data()) {
                        *x += bias;
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            OpKind::SliceRows { start, end } => a.slice_rows(start, end)?,
            OpKind::Dense(act) => {
                let w = b.expect("arity");
                let bias = self.value(inputs[2]);
                if !a.is_matrix() || !w.is_matrix() || a.cols() != w.cols() {
                    return Err(shape_err(kind, a, w));
                }
                if bias.shape() != [w.rows()] {
                    return Err(shape_err(kind, w, bias));
                }
                let (m, k, n) = (a.rows(), a.cols(), w.rows());
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(bias.data());
                }
                gemm(
                    Mat::new(a.data(), m, k, false),
                    Mat::new(w.data(), k, n, true),
                    &mut out,
                    true,
                );
                match act {
                    Activation::Relu => out.iter_mut().for_each(|x| *x = x.max(0.0)),
                    Activation::Tanh => out.iter_mut().for_each(|x| *x = x.tanh()),
                    Activation::Linear => {}
                }
                Tensor::from_parts(vec![m, n], out)
            }
            OpKind::PairwiseSqDist => {
                let b = b.expect("arity");
                if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
                    return Err(shape_err(kind, a, b));
                }
                let (m, n) = (a.rows(), b.rows());
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let ai = a.row(i);
                    for j in 0..n {
                        let d: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                        out.push(d);
                    }
                }
                Tensor::from_parts(vec![m, n], out)
            }
            OpKind::KernelOffDiagSum(kernel) => kernel_pairs(kernel, a, b.expect("arity"), inputs[0] == inputs[1])?.0,
            OpKind::OffDiagSum => {
                if !a.is_matrix() || a.rows() != a.cols() {
                    return Err(Error::invalid(format!(
                        "{kind} needs a square matrix, got {:?}",
                        a.shape()
                    )));
                }
                let n = a.rows();
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            s += a.get(i, j);
                        }
                    }
                }
                Tensor::from_parts(vec![1], vec![s])
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Fan-out is handled by summing contributions. The relu derivative at
    /// exactly zero is taken as 0 and so is the derivative of `abs` at zero.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, node {} has shape {:?}",
                root.0,
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::from_parts(root_value.shape().to_vec(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Op::Apply(kind, inputs) = &node.op else {
                continue;
            };
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(*kind, inputs, node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.data().iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient at node {idx}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, kind: OpKind, inputs: &[NodeId], node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let a_id = inputs[0];
        let a = self.value(a_id);
        let b_id = inputs.get(1).copied();
        let want_a = self.nodes[a_id.0].tracked;
        let want_b = b_id.is_some_and(|id| self.nodes[id.0].tracked);

        match kind {
            OpKind::MatMul => {
                let b_id = b_id.expect("arity");
                let b = self.value(b_id);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if want_a {
                    // dA = dC · Bᵀ
                    accumulate_with(grads, a_id, a, |acc| {
                        gemm(
                            Mat::new(up.data(), m, n, false),
                            Mat::new(b.data(), n, k, true),
                            acc,
                            true,
                        )
                    });
                }
                if want_b {
                    // dB = Aᵀ · dC
                    accumulate_with(grads, b_id, b, |acc| {
                        gemm(
                            Mat::new(a.data(), k, m, true),
                            Mat::new(up.data(), m, n, false),
                            acc,
                            true,
                        )
                    });
                }
            }
            OpKind::Transpose => {
                let t = up.transpose().expect("matrix");
                accumulate(grads, a_id, a, t.data(), 1.0);
            }
            OpKind::Add | OpKind::Sub => {
                if want_a {
                    accumulate(grads, a_id, a, up.data(), 1.0);
                }
                if want_b {
                    let b_id = b_id.expect("arity");
                    let sign = if kind == OpKind::Add { 1.0 } else { -1.0 };
                    accumulate(grads, b_id, self.value(b_id), up.data(), sign);
                }
            }
            OpKind::Mul => {
                let b_id = b_id.expect("arity");
                let b = self.value(b_id);
                if want_a {
                    let d: Vec<f64> = up.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, a_id, a, &d, 1.0);
                }
                if want_b {
                    let d: Vec<f64> = up.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, b_id, b, &d, 1.0);
                }
            }
            OpKind::Scale(s) => accumulate(grads, a_id, a, up.data(), s),
            OpKind::Relu => {
                let d = zip_local(up, a, |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, a_id, a, &d, 1.0);
            }
            OpKind::Tanh => {
                let d = zip_local(up, out, |g, y| g * (1.0 - y * y));
                accumulate(grads, a_id, a, &d, 1.0);
            }
            OpKind::Square => {
                let d = zip_local(up, a, |g, x| 2.0 * g * x);
                accumulate(grads, a_id, a, &d, 1.0);
            }
            OpKind::Abs => {
                let d = zip_local(up, a, |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(grads, a_id, a, &d, 1.0);
            }
            OpKind::Exp => {
                let d = zip_local(up, out, |g, y| g * y);
                accumulate(grads, a_id, a, &d, 1.0);
            }
            OpKind::Sum | OpKind::Mean => {
                let g = up.data()[0];
                let g = if kind == OpKind::Mean { g / a.numel() as f64 } else { g };
                accumulate_with(grads, a_id, a, |acc| acc.iter_mut().for_each(|x| *x += g));
            }
            OpKind::BroadcastAdd => {
                if want_a {
                    accumulate(grads, a_id, a, up.data(), 1.0);
                }
                if want_b {
                    let b_id = b_id.expect("arity");
                    let c = a.cols();
                    accumulate_with(grads, b_id, self.value(b_id), |acc| {
                        for row in up.data().chunks_exact(c) {
                            for (s, &g) in acc.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                    });
                }
            }
            OpKind::SliceRows { start, .. } => {
                let c = a.cols();
                let offset = start * c;
                accumulate_with(grads, a_id, a, |acc| {
                    for (s, &g) in acc[offset..offset + up.numel()].iter_mut().zip(up.data()) {
                        *s += g;
                    }
                });
            }
            OpKind::PairwiseSqDist => {
                let b_id = b_id.expect("arity");
                let b = self.value(b_id);
                let (m, n, d) = (a.rows(), b.rows(), a.cols());
                // dA_i = 2 Σ_j g_ij (a_i − b_j);  dB_j = 2 Σ_i g_ij (b_j − a_i)
                if want_a {
                    accumulate_with(grads, a_id, a, |acc| {
                        for i in 0..m {
                            let ai = a.row(i);
                            let gi = &up.data()[i * n..(i + 1) * n];
                            let dst = &mut acc[i * d..(i + 1) * d];
                            for (j, &g) in gi.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                for ((s, &x), &y) in dst.iter_mut().zip(ai).zip(b.row(j)) {
                                    *s += 2.0 * g * (x - y);
                                }
                            }
                        }
                    });
                }
                if want_b {
                    accumulate_with(grads, b_id, b, |acc| {
                        for i in 0..m {
                            let ai = a.row(i);
                            let gi = &up.data()[i * n..(i + 1) * n];
                            for (j, &g) in gi.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                let dst = &mut acc[j * d..(j + 1) * d];
                                for ((s, &x), &y) in dst.iter_mut().zip(ai).zip(b.row(j)) {
                                    *s += 2.0 * g * (y - x);
                                }
                            }
                        }
                    });
                }
            }
            OpKind::KernelOffDiagSum(_) => {
                let g = up.data()[0];
                let d = node.aux.as_ref().expect("tracked kernel node keeps derivatives");
                let n = a.numel();
                if want_a {
                    accumulate(grads, a_id, a, &d[..n], g);
                }
                if let (Some(b_id), true) = (b_id, want_b && b_id != Some(a_id)) {
                    accumulate(grads, b_id, self.value(b_id), &d[n..], g);
                }
            }
            OpKind::Dense(act) => {
                let w_id = b_id.expect("arity");
                let w = self.value(w_id);
                let bias_id = inputs[2];
                let (m, k, n) = (a.rows(), a.cols(), w.rows());
                // upstream through the activation, written in terms of its output
                let local;
                let d: &[f64] = match act {
                    Activation::Relu => {
                        local = zip_local(up, out, |g, y| if y > 0.0 { g } else { 0.0 });
                        &local
                    }
                    Activation::Tanh => {
                        local = zip_local(up, out, |g, y| g * (1.0 - y * y));
                        &local
                    }
                    Activation::Linear => up.data(),
                };
                if want_a {
                    accumulate_with(grads, a_id, a, |acc| {
                        gemm(Mat::new(d, m, n, false), Mat::new(w.data(), n, k, false), acc, true)
                    });
                }
                if want_b {
                    accumulate_with(grads, w_id, w, |acc| {
                        gemm(Mat::new(d, n, m, true), Mat::new(a.data(), m, k, false), acc, true)
                    });
                }
                if self.nodes[bias_id.0].tracked {
                    accumulate_with(grads, bias_id, self.value(bias_id), |acc| {
                        for row in d.chunks_exact(n) {
                            for (s, &g) in acc.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                    });
                }
            }
            OpKind::OffDiagSum => {
                let g = up.data()[0];
                let n = a.rows();
                accumulate_with(grads, a_id, a, |acc| {
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                acc[i * n + j] += g;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn zip_local(up: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    up.data().iter().zip(other.data()).map(|(&g, &x)| f(g, x)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, like: &Tensor, d: &[f64], scale: f64) {
    accumulate_with(grads, id, like, |acc| {
        for (s, &x) in acc.iter_mut().zip(d) {
            *s += scale * x;
        }
    });
}

fn accumulate_with(grads: &mut [Option<Tensor>], id: NodeId, like: &Tensor, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(like.shape()));
    f(slot.data_mut());
}

macro_rules! unary {
    ($($name:ident => $kind:expr),* $(,)?) => {
        impl Graph {
            $(
                pub fn $name(&mut self, a: NodeId) -> Result<NodeId> {
                    self.apply($kind, &[a])
                }
            )*
        }
    };
}

macro_rules! binary {
    ($($name:ident => $kind:expr),* $(,)?) => {
        impl Graph {
            $(
                pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
                    self.apply($kind, &[a, b])
                }
            )*
        }
    };
}

unary! {
    transpose => OpKind::Transpose,
    relu => OpKind::Relu,
    tanh => OpKind::Tanh,
    square => OpKind::Square,
    abs => OpKind::Abs,
    exp => OpKind::Exp,
    sum => OpKind::Sum,
    mean => OpKind::Mean,
    off_diag_sum => OpKind::OffDiagSum,
}

binary! {
    matmul => OpKind::MatMul,
    add => OpKind::Add,
    sub => OpKind::Sub,
    mul => OpKind::Mul,
    broadcast_add => OpKind::BroadcastAdd,
    pairwise_sq_dist => OpKind::PairwiseSqDist,
}

/// `Σ_{i≠j} k(a_i, b_j)` and its derivatives `[∂/∂a; ∂/∂b]` flattened.
///
/// With `same` the inputs are one node and the whole derivative lands in
/// the `∂/∂a` half.
fn kernel_pairs(kernel: RbfCoeffs, a: &Tensor, b: &Tensor, same: bool) -> Result<(Tensor, Vec<f64>)> {
    if !a.is_matrix() || a.shape() != b.shape() {
        return Err(shape_err(OpKind::KernelOffDiagSum(kernel), a, b));
    }
    let n = a.numel();
    let mut deriv = vec![0.0; 2 * n];
    let total = if same {
        2.0 * within_sum(&kernel, a, Some((&mut deriv[..n], 2.0)))?
    } else {
        let (da, db) = deriv.split_at_mut(n);
        cross_sum(&kernel, a, b, Some((da, db, 1.0)))?
    };
    Ok((Tensor::from_parts(vec![1], vec![total]), deriv))
}

impl Graph {
    /// Pass the same node twice for the within-sample sum.
    pub fn kernel_off_diag_sum(&mut self, a: NodeId, b: NodeId, kernel: RbfCoeffs) -> Result<NodeId> {
        self.apply(OpKind::KernelOffDiagSum(kernel), &[a, b])
    }

    /// One fully-connected layer, `act(x · Wᵀ + b)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Activation) -> Result<NodeId> {
        self.apply(OpKind::Dense(act), &[x, w, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(s), &[a])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}
