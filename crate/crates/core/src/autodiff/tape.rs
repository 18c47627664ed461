//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles.
//! Calling [`Tape::backward`] once walks the record in reverse and
//! returns the gradient of a scalar root with respect to every node.

use std::ops::Range;

use crate::autodiff::tensor::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Expm1,
    Log1p,
    Sigmoid,
    Softplus,
    Neg,
    Recip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Element-wise operation kinds, unary and binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Unary(UnaryKind),
    Binary(BinaryKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Fused operation with a hand-written gradient rule.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::push_custom`] together with the op, which keeps whatever it
/// needs from the forward pass.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order and shape.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Unary(UnaryKind),
    Binary(BinaryKind),
    MatMul,
    Concat { axis: usize, extents: Vec<usize> },
    Slice { axis: usize, range: Range<usize> },
    Reduce { kind: ReduceKind, axis: usize, argmax: Vec<usize> },
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    CumSum,
    GatherRows { indices: Vec<usize> },
    Reshape,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
}

/// Append-only operation record. One forward/backward cycle per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` is
    /// not an ancestor of the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_ancestor(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_value(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Expm1 => x.exp_m1(),
        UnaryKind::Log1p => x.ln_1p(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Neg => -x,
        UnaryKind::Recip => 1.0 / x,
    }
}

/// Derivative given input `x` and output `y`.
fn unary_deriv(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Exp => y,
        UnaryKind::Expm1 => y + 1.0,
        UnaryKind::Log1p => 1.0 / (1.0 + x),
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Neg => -1.0,
        UnaryKind::Recip => -y * y,
    }
}

fn binary_value(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn log_softmax_row(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = row.iter().map(|v| (v - lse).exp()).collect();
    (lse, probs)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        debug_assert!(parents.iter().all(|&p| p < self.nodes.len()));
        self.nodes.push(Node { value, parents, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Unary(k), None) => self.unary(k, a),
            (ElementwiseKind::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseKind::Unary(_), Some(_)) => Err(invalid("unary op given two operands")),
            (ElementwiseKind::Binary(_), None) => Err(invalid("binary op missing second operand")),
        }
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| unary_value(kind, x));
        self.push(value, vec![a.0], Op::Unary(kind), "unary")
    }

    /// Binary op with equal shapes, or one side holding a single element.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| binary_value(kind, x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| binary_value(kind, x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| binary_value(kind, x, y))
        } else {
            return Err(shape_err(
                "binary",
                format!("{:?} or a scalar", ta.shape()),
                format!("{:?}", tb.shape()),
            ));
        };
        self.push(value, vec![a.0, b.0], Op::Binary(kind), "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.mul(a, c)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("[m,k]x[k,n] with left {:?}", ta.shape()),
                format!("{:?}", tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let value = Tensor::from_parts(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n));
        self.push(value, vec![a.0, b.0], Op::MatMul, "matmul")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(format!("concat axis {axis} out of range for rank {}", base.len())));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let agrees = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(shape_err("concat", format!("extents matching {base:?} off axis {axis}"), format!("{s:?}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &n) in parts.iter().zip(&extents) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.push(value, parts.iter().map(|v| v.0).collect(), Op::Concat { axis, extents }, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || range.start > range.end || range.end > shape[axis] {
            return Err(shape_err("slice", format!("range within axis {axis} of {shape:?}"), format!("{range:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let width = range.end - range.start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&src[base + range.start * inner..base + range.end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::from_parts(out_shape, data);
        self.push(value, vec![a.0], Op::Slice { axis, range }, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push(value, vec![a.0], Op::Reshape, "reshape")
    }

    /// Reduces over `axis`, removing it from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid(format!("reduce axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[o * n * inner + j * inner + i];
                data[o * inner + i] = match kind {
                    ReduceKind::Sum => (0..n).map(at).sum(),
                    ReduceKind::Mean => (0..n).map(at).sum::<f64>() / n as f64,
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax.push(best);
                        at(best)
                    }
                };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, data);
        self.push(value, vec![a.0], Op::Reduce { kind, axis, argmax }, "reduce")
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.reduce(ReduceKind::Sum, flat, 0)
    }

    /// Mean negative log-softmax at `labels`. `logits` is `[C]` with one
    /// label or `[R, C]` with one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, classes) = match t.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => return Err(shape_err("cross_entropy", "[C] or [R, C]", format!("{s:?}"))),
        };
        if labels.len() != rows {
            return Err(shape_err("cross_entropy", format!("{rows} labels"), format!("{}", labels.len())));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(rows * classes);
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let row = &t.data()[r * classes..(r + 1) * classes];
            let (lse, p) = log_softmax_row(row);
            loss += lse - row[label];
            probs.extend(p);
        }
        let value = Tensor::scalar(loss / rows as f64);
        self.push(
            value,
            vec![logits.0],
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Running sum along axis 0.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("cumsum of a scalar"));
        }
        let (_, n, inner) = split_axis(&shape, 0);
        let mut data = self.value(a).data().to_vec();
        for j in 1..n {
            for i in 0..inner {
                data[j * inner + i] += data[(j - 1) * inner + i];
            }
        }
        let value = Tensor::from_parts(shape, data);
        self.push(value, vec![a.0], Op::CumSum, "cumsum")
    }

    /// Selects rows of a `[R, C]` tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", "[R, C]", format!("{:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(invalid(format!("gather_rows index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), cols], data);
        self.push(
            value,
            vec![a.0],
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn push_custom(&mut self, inputs: &[Var], output: Tensor, op: impl CustomOp + 'static) -> Result<Var> {
        let name = op.name();
        self.push(output, inputs.iter().map(|v| v.0).collect(), Op::Custom(Box::new(op)), name)
    }

    /// Gradients of the scalar `root` with respect to every node.
    ///
    /// May run once per tape; a second call is an error.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(&root_shape));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let parent_grads = self.node_backward(node, &g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                accumulate(&mut grads[p], pg);
            }
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<Tensor> {
        let input = |i: usize| &self.nodes[node.parents[i]].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(kind) => {
                let x = input(0);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * unary_deriv(*kind, x, y))
                    .collect();
                vec![Tensor::from_parts(x.shape().to_vec(), data)]
            }
            Op::Binary(kind) => {
                let (a, b) = (input(0), input(1));
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..g.numel())
                    .map(|i| {
                        let x = a.data()[if a.numel() == 1 { 0 } else { i }];
                        let y = b.data()[if b.numel() == 1 { 0 } else { i }];
                        let gi = g.data()[i];
                        match kind {
                            BinaryKind::Add => (gi, gi),
                            BinaryKind::Sub => (gi, -gi),
                            BinaryKind::Mul => (gi * y, gi * x),
                        }
                    })
                    .unzip();
                vec![reduce_broadcast(a, ga), reduce_broadcast(b, gb)]
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let bt = transpose_raw(b.data(), k, n);
                let at = transpose_raw(a.data(), m, k);
                vec![
                    Tensor::from_parts(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)),
                    Tensor::from_parts(vec![k, n], matmul_raw(&at, g.data(), k, m, n)),
                ]
            }
            Op::Concat { axis, extents } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                extents
                    .iter()
                    .enumerate()
                    .map(|(p, &n)| {
                        let mut data = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            data.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        offset += n;
                        Tensor::from_parts(input(p).shape().to_vec(), data)
                    })
                    .collect()
            }
            Op::Slice { axis, range } => {
                let x = input(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let width = range.end - range.start;
                let mut data = vec![0.0; x.numel()];
                for o in 0..outer {
                    let dst = o * n * inner + range.start * inner;
                    let src = o * width * inner;
                    data[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
                }
                vec![Tensor::from_parts(x.shape().to_vec(), data)]
            }
            Op::Reduce { kind, axis, argmax } => {
                let x = input(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut data = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g.data()[o * inner + i];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let v = if *kind == ReduceKind::Mean { gi / n as f64 } else { gi };
                                for j in 0..n {
                                    data[o * n * inner + j * inner + i] = v;
                                }
                            }
                            ReduceKind::Max => {
                                let j = argmax[o * inner + i];
                                data[o * n * inner + j * inner + i] = gi;
                            }
                        }
                    }
                }
                vec![Tensor::from_parts(x.shape().to_vec(), data)]
            }
            Op::CrossEntropy { labels, probs } => {
                let x = input(0);
                let rows = labels.len();
                let classes = x.numel() / rows;
                let scale = g.data()[0] / rows as f64;
                let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    data[r * classes + l] -= scale;
                }
                vec![Tensor::from_parts(x.shape().to_vec(), data)]
            }
            Op::CumSum => {
                let x = input(0);
                let (_, n, inner) = split_axis(x.shape(), 0);
                let mut data = g.data().to_vec();
                for j in (0..n.saturating_sub(1)).rev() {
                    for i in 0..inner {
                        data[j * inner + i] += data[(j + 1) * inner + i];
                    }
                }
                vec![Tensor::from_parts(x.shape().to_vec(), data)]
            }
            Op::GatherRows { indices } => {
                let x = input(0);
                let cols = x.shape()[1];
                let mut data = vec![0.0; x.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        data[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                vec![Tensor::from_parts(x.shape().to_vec(), data)]
            }
            Op::Reshape => vec![Tensor::from_parts(input(0).shape().to_vec(), g.data().to_vec())],
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = (0..node.parents.len()).map(input).collect();
                op.backward(&inputs, &node.value, g)
            }
        }
    }
}

fn reduce_broadcast(target: &Tensor, grad: Vec<f64>) -> Tensor {
    if target.numel() == grad.len() {
        Tensor::from_parts(target.shape().to_vec(), grad)
    } else {
        Tensor::from_parts(target.shape().to_vec(), vec![grad.iter().sum()])
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            let data = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
            *acc = Tensor::from_parts(acc.shape().to_vec(), data);
        }
    }
}
