//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Node ids are handed out in creation order, which is already a topological
//! order, so the backward pass is a single reverse sweep over the node list.
//!
//! Tensors are rank 0, 1 or 2 and stored row-major. Elementwise binary ops
//! accept equal shapes, a scalar on either side, or a `[K]` row vector against
//! a `[B, K]` matrix (the vector is repeated over rows).
//!
//! Op constructors panic on shape mismatches: those are programming errors in
//! the model code, not data errors. Non-finite values are reported by
//! [`Graph::grad`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("tensor shape {shape:?} needs {expected} elements, got {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("node {node} is not a leaf of the graph")]
    NotALeaf { node: usize },
    #[error("non-finite value at node {node} ({op}) during backward")]
    NonFinite { node: usize, op: &'static str },
    #[error("logsumexp of an empty vector")]
    EmptyInput,
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeData {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `[rows.len(), cols]` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Length of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn reshaped(&self, shape: Vec<usize>) -> Self {
        Self {
            shape,
            data: self.data.clone(),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryOp {
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Relu,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    MinScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// lhs is `[K]`, rhs and output `[B, K]`.
    LhsRow(usize),
    /// rhs is `[K]`, lhs and output `[B, K]`.
    RhsRow(usize),
}

impl Broadcast {
    #[inline]
    fn lhs(self, i: usize) -> usize {
        match self {
            Broadcast::LhsScalar => 0,
            Broadcast::LhsRow(k) => i % k,
            _ => i,
        }
    }

    #[inline]
    fn rhs(self, i: usize) -> usize {
        match self {
            Broadcast::RhsScalar => 0,
            Broadcast::RhsRow(k) => i % k,
            _ => i,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var, Broadcast),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanAxis0(Var),
    LogSumExpLast(Var),
    Reshape(Var),
    SliceCols { src: Var, start: usize },
    Pick { src: Var, index: Vec<usize> },
    TileRows { src: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(u, _) => match u {
                UnaryOp::Neg => "neg",
                UnaryOp::Exp => "exp",
                UnaryOp::Log => "log",
                UnaryOp::Square => "square",
                UnaryOp::Sqrt => "sqrt",
                UnaryOp::Relu => "relu",
                UnaryOp::Softplus => "softplus",
                UnaryOp::Scale(_) => "scale",
                UnaryOp::AddScalar(_) => "add_scalar",
                UnaryOp::MinScalar(_) => "min_scalar",
            },
            Op::Binary(b, ..) => match b {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MeanAxis0(_) => "mean_axis0",
            Op::LogSumExpLast(_) => "logsumexp",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::Pick { .. } => "pick",
            Op::TileRows { .. } => "tile_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-use computation graph. Build it, read values, call [`Graph::grad`], drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Overflow-safe `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(v) + log Σ exp(v − max(v))`.
pub fn logsumexp(v: &[f64]) -> Result<f64, AutodiffError> {
    if v.is_empty() {
        return Err(AutodiffError::EmptyInput);
    }
    Ok(lse(v))
}

#[inline]
fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives gradients (inputs, noise, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let value = match op {
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Log => x.map(f64::ln),
            UnaryOp::Square => x.map(|v| v * v),
            UnaryOp::Sqrt => x.map(f64::sqrt),
            UnaryOp::Relu => x.map(|v| v.max(0.0)),
            UnaryOp::Softplus => x.map(softplus),
            UnaryOp::Scale(c) => x.map(|v| v * c),
            UnaryOp::AddScalar(c) => x.map(|v| v + c),
            UnaryOp::MinScalar(c) => x.map(|v| v.min(c)),
        };
        let rg = self.rg(a);
        self.push(Op::Unary(op, a), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::AddScalar(c), a)
    }
    /// Elementwise `min(a, c)`; the gradient is passed through only where `a < c`.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::MinScalar(c), a)
    }

    fn broadcast(&self, a: Var, b: Var) -> (Broadcast, Vec<usize>) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            (Broadcast::Same, sa.to_vec())
        } else if sb.is_empty() {
            (Broadcast::RhsScalar, sa.to_vec())
        } else if sa.is_empty() {
            (Broadcast::LhsScalar, sb.to_vec())
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            (Broadcast::RhsRow(sb[0]), sa.to_vec())
        } else if sa.len() == 1 && sb.len() == 2 && sb[1] == sa[0] {
            (Broadcast::LhsRow(sa[0]), sb.to_vec())
        } else {
            panic!("incompatible shapes {sa:?} and {sb:?}")
        }
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Var {
        let (bc, shape) = self.broadcast(a, b);
        let x = self.value(a).data();
        let y = self.value(b).data();
        let n: usize = shape.iter().product();
        let f = match op {
            BinaryOp::Add => |p: f64, q: f64| p + q,
            BinaryOp::Sub => |p: f64, q: f64| p - q,
            BinaryOp::Mul => |p: f64, q: f64| p * q,
            BinaryOp::Div => |p: f64, q: f64| p / q,
        };
        let data: Vec<f64> = match bc {
            Broadcast::Same => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            _ => (0..n).map(|i| f(x[bc.lhs(i)], y[bc.rhs(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Binary(op, a, b, bc), Tensor { shape, data }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `[B, D] × [D, H] → [B, H]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} x {sb:?}"
        );
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Op::MatMul(a, b),
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            rg,
        )
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Mean of all entries, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Sum over the last axis: `[K] → []`, `[B, K] → [B]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(a);
        self.push(Op::SumLast(a), Tensor { shape, data }, rg)
    }

    /// Mean over rows: `[B, K] → [K]`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "mean_axis0 needs a matrix");
        let (b, k) = (t.rows(), t.cols());
        let mut data = vec![0.0; k];
        for r in t.data().chunks(k) {
            for (d, &v) in data.iter_mut().zip(r) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= b as f64);
        let rg = self.rg(a);
        self.push(Op::MeanAxis0(a), Tensor::vector(data), rg)
    }

    /// Stable log-sum-exp over the last axis: `[K] → []`, `[B, K] → [B]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.rank() >= 1 && t.cols() >= 1, "logsumexp of an empty axis");
        let data: Vec<f64> = t.data().chunks(t.cols()).map(lse).collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let rg = self.rg(a);
        self.push(Op::LogSumExpLast(a), Tensor { shape, data }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(
            t.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            t.shape()
        );
        let value = t.reshaped(shape.to_vec());
        let rg = self.rg(a);
        self.push(Op::Reshape(a), value, rg)
    }

    /// Columns `start..end` of a `[B, K]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(t.rank() == 2 && start < end && end <= t.cols(), "slice_cols");
        let data: Vec<f64> = t
            .data()
            .chunks(t.cols())
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let shape = vec![t.rows(), end - start];
        let rg = self.rg(a);
        self.push(Op::SliceCols { src: a, start }, Tensor { shape, data }, rg)
    }

    /// Row-wise gather `out[b] = a[b, index[b]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Var {
        let t = self.value(a);
        assert!(t.rank() == 2 && t.rows() == index.len(), "pick");
        let c = t.cols();
        let data: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(b, &j)| {
                assert!(j < c, "pick index {j} out of range {c}");
                t.data()[b * c + j]
            })
            .collect();
        let rg = self.rg(a);
        self.push(
            Op::Pick {
                src: a,
                index: index.to_vec(),
            },
            Tensor::vector(data),
            rg,
        )
    }

    /// Stacks `reps` copies of `a` along the first axis.
    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Var {
        let t = self.value(a);
        assert!(t.rank() >= 1 && reps >= 1, "tile_rows");
        let mut shape = t.shape().to_vec();
        shape[0] *= reps;
        let mut data = Vec::with_capacity(t.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(a);
        self.push(Op::TileRows { src: a }, Tensor { shape, data }, rg)
    }

    /// Gradients of the scalar `output` with respect to each leaf in `params`.
    ///
    /// Leaves that `output` does not depend on get zero tensors.
    pub fn grad(&self, output: Var, params: &[Var]) -> Result<Vec<Tensor>, AutodiffError> {
        let out = &self.nodes[output.0];
        if !out.value.shape().is_empty() {
            return Err(AutodiffError::NonScalarOutput {
                shape: out.value.shape().to_vec(),
            });
        }
        for p in params {
            if !matches!(self.nodes[p.0].op, Op::Leaf) {
                return Err(AutodiffError::NotALeaf { node: p.0 });
            }
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut adj);
        }
        Ok(params
            .iter()
            .map(|p| {
                let shape = self.nodes[p.0].value.shape().to_vec();
                match adj.get(p.0).and_then(|a| a.clone()) {
                    Some(data) => Tensor { shape, data },
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn accumulate<'a>(
        &self,
        adj: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j]
                            * match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Exp => y[j],
                                UnaryOp::Log => 1.0 / x[j],
                                UnaryOp::Square => 2.0 * x[j],
                                UnaryOp::Sqrt => 0.5 / y[j],
                                UnaryOp::Relu => f64::from(u8::from(x[j] > 0.0)),
                                UnaryOp::Softplus => sigmoid(x[j]),
                                UnaryOp::Scale(c) => *c,
                                UnaryOp::AddScalar(_) => 1.0,
                                UnaryOp::MinScalar(c) => f64::from(u8::from(x[j] < *c)),
                            };
                    }
                }
            }
            Op::Binary(op, a, b, bc) => {
                let x = self.value(*a).data();
                let y = self.value(*b).data();
                let bc = *bc;
                if let Some(ga) = self.accumulate(adj, *a) {
                    for j in 0..g.len() {
                        let (l, r) = (bc.lhs(j), bc.rhs(j));
                        ga[l] += match op {
                            BinaryOp::Add | BinaryOp::Sub => g[j],
                            BinaryOp::Mul => g[j] * y[r],
                            BinaryOp::Div => g[j] / y[r],
                        };
                    }
                }
                if let Some(gb) = self.accumulate(adj, *b) {
                    for j in 0..g.len() {
                        let (l, r) = (bc.lhs(j), bc.rhs(j));
                        gb[r] += match op {
                            BinaryOp::Add => g[j],
                            BinaryOp::Sub => -g[j],
                            BinaryOp::Mul => g[j] * x[l],
                            BinaryOp::Div => -g[j] * x[l] / (y[r] * y[r]),
                        };
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.accumulate(adj, *a) {
                    gemm_nt(g, tb.data(), ga, n, m, k);
                }
                if let Some(gb) = self.accumulate(adj, *b) {
                    gemm_tn(ta.data(), g, gb, n, k, m);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumLast(a) => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.accumulate(adj, *a) {
                    for (row, &gr) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|v| *v += gr);
                    }
                }
            }
            Op::MeanAxis0(a) => {
                let t = self.value(*a);
                let (b, k) = (t.rows(), t.cols());
                if let Some(ga) = self.accumulate(adj, *a) {
                    for row in ga.chunks_mut(k) {
                        for (v, &gk) in row.iter_mut().zip(g) {
                            *v += gk / b as f64;
                        }
                    }
                }
            }
            Op::LogSumExpLast(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let y = node.value.data();
                if let Some(ga) = self.accumulate(adj, *a) {
                    for (r, (grow, xrow)) in ga.chunks_mut(c).zip(t.data().chunks(c)).enumerate() {
                        for (gv, &xv) in grow.iter_mut().zip(xrow) {
                            *gv += g[r] * (xv - y[r]).exp();
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.accumulate(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(v, &d)| *v += d);
                }
            }
            Op::SliceCols { src, start } => {
                let c = self.value(*src).cols();
                let w = node.value.cols();
                if let Some(ga) = self.accumulate(adj, *src) {
                    for (row, grow) in ga.chunks_mut(c).zip(g.chunks(w)) {
                        for (v, &d) in row[*start..*start + w].iter_mut().zip(grow) {
                            *v += d;
                        }
                    }
                }
            }
            Op::Pick { src, index } => {
                let c = self.value(*src).cols();
                if let Some(ga) = self.accumulate(adj, *src) {
                    for (b, &j) in index.iter().enumerate() {
                        ga[b * c + j] += g[b];
                    }
                }
            }
            Op::TileRows { src, .. } => {
                if let Some(ga) = self.accumulate(adj, *src) {
                    let n = ga.len();
                    for chunk in g.chunks(n) {
                        ga.iter_mut().zip(chunk).for_each(|(v, &d)| *v += d);
                    }
                }
            }
        }
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n×k] += a[n×m] · b[k×m]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            c[i * k + j] += dot(arow, &b[j * m..(j + 1) * m]);
        }
    }
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let brow = &b[r * m..(r + 1) * m];
        for (i, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.grad(y, &[x]).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.grad(y, &[x]).unwrap()[0].item(), 0.5);
    }

    #[test]
    fn logsumexp_values() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = [0.3, -1.2, 2.0];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&v).unwrap() - naive).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), Err(AutodiffError::EmptyInput));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(
            g.grad(y, &[x]),
            Err(AutodiffError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn nan_is_surfaced() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-1.0));
        let y = g.log(x);
        assert!(matches!(
            g.grad(y, &[x]),
            Err(AutodiffError::NonFinite { op: "log", .. })
        ));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.exp(x);
        let grads = g.grad(y, &[x, unused]).unwrap();
        assert_eq!(grads[1], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_leaf_param_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.exp(x);
        let z = g.exp(y);
        assert_eq!(g.grad(z, &[y]), Err(AutodiffError::NotALeaf { node: y.id() }));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        // f(x) = x * x + x, f'(x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let xx = g.mul(x, x);
        let y = g.add(xx, x);
        assert_eq!(g.grad(y, &[x]).unwrap()[0].item(), 4.0);
    }

    #[test]
    fn tensor_shape_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3]).len(), 6);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn row_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::vector(vec![10., 20.]));
        let c = g.add(a, b);
        assert_eq!(g.value(c).data(), &[11., 22., 13., 24.]);
        let d = g.sub(b, a);
        assert_eq!(g.value(d).data(), &[9., 18., 7., 16.]);
    }
}
