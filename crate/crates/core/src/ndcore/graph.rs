//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. One call to
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every leaf that was marked as requiring them. A graph is single-use: to
//! differentiate again, build a fresh graph and re-run the forward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Mish(usize),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get(id.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get_mut(id.index).and_then(Option::take)
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = Tensor::zeros(shape[0], shape[1]);
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *o = f(x, y);
        }
        return out;
    }
    let (ad, bd) = (a.data(), b.data());
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            let v = f(ad[bidx(a, r, c)], bd[bidx(b, r, c)]);
            out.data_mut()[r * shape[1] + c] = v;
        }
    }
    out
}

/// Sums a full-shape gradient down onto an operand that was broadcast.
fn reduce_to(grad: &Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target.rows(), target.cols());
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let i = bidx(target, r, c);
            out.data_mut()[i] += grad.at(r, c);
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let tsp = softplus(x).tanh();
    let sig = 1.0 / (1.0 + (-x).exp());
    tsp + x * (1.0 - tsp * tsp) * sig
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(id.index)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        let i = self.index(id)?;
        Ok(&self.nodes[i].value)
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// A constant input; no gradient is reported for it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf, typically a network parameter.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, "param")
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn unary(
        &mut self,
        x: NodeId,
        name: &'static str,
        op: fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let i = self.index(x)?;
        let v = self.nodes[i].value.map(f);
        let rg = self.rg(i);
        self.push(v, op(i), rg, name)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        let shape = broadcast_shape(name, &self.nodes[i].value, &self.nodes[j].value)?;
        let v = zip_broadcast(&self.nodes[i].value, &self.nodes[j].value, shape, f);
        let rg = self.rg(i) || self.rg(j);
        self.push(v, op(i, j), rg, name)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        let v = self.nodes[i].value.matmul(&self.nodes[j].value)?;
        let rg = self.rg(i) || self.rg(j);
        self.push(v, Op::MatMul(i, j), rg, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "minimum", Op::Minimum, f64::min)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let i = self.index(x)?;
        let v = self.nodes[i].value.map(|a| a * s);
        let rg = self.rg(i);
        self.push(v, Op::Scale(i, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let i = self.index(x)?;
        let v = self.nodes[i].value.map(|a| a + s);
        let rg = self.rg(i);
        self.push(v, Op::AddScalar(i), rg, "add_scalar")
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "tanh", Op::Tanh, f64::tanh)
    }

    pub fn mish(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "mish", Op::Mish, mish)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "relu", Op::Relu, |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "exp", Op::Exp, f64::exp)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "square", Op::Square, |v| v * v)
    }

    /// Elementwise clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let i = self.index(x)?;
        let v = self.nodes[i].value.map(|a| a.clamp(lo, hi));
        let rg = self.rg(i);
        self.push(v, Op::Clamp(i, lo, hi), rg, "clamp")
    }

    /// Row sums: `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.index(x)?;
        let t = &self.nodes[i].value;
        let v = Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect());
        let rg = self.rg(i);
        self.push(v, Op::SumCols(i), rg, "sum_cols")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.index(x)?;
        let v = Tensor::scalar(self.nodes[i].value.data().iter().sum());
        let rg = self.rg(i);
        self.push(v, Op::Sum(i), rg, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.index(x)?;
        let t = &self.nodes[i].value;
        if t.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(i);
        self.push(v, Op::Mean(i), rg, "mean")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx = parts
            .iter()
            .map(|&p| self.index(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = idx.first().map_or(0, |&i| self.nodes[i].value.rows());
        let mut cols = 0;
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idx {
                let src = self.nodes[i].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, Op::ConcatCols(idx), rg, "concat_cols")
    }

    /// Runs reverse-mode accumulation from a scalar node. The graph cannot
    /// be differentiated twice.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        let root = self.index(loss)?;
        let shape = self.nodes[root].value.shape().to_vec();
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;

        let n = root + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].requires_grad {
                        let mut ga = Tensor::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, true, &mut ga, 0.0);
                        accumulate(&mut grads[a], ga);
                    }
                    if self.nodes[b].requires_grad {
                        let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(av, true, &g, false, &mut gb, 0.0);
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads[a], reduce_to(&g, &self.nodes[a].value));
                    }
                    if self.nodes[b].requires_grad {
                        let gb = reduce_to(&g, &self.nodes[b].value).map(|v| sign * v);
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let is_div = matches!(node.op, Op::Div(..));
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let shape = [g.rows(), g.cols()];
                    if self.nodes[a].requires_grad {
                        let full = if is_div {
                            zip_broadcast(&g, bv, shape, |gg, y| gg / y)
                        } else {
                            zip_broadcast(&g, bv, shape, |gg, y| gg * y)
                        };
                        accumulate(&mut grads[a], reduce_to(&full, av));
                    }
                    if self.nodes[b].requires_grad {
                        let full = if is_div {
                            // d(x/y)/dy = -x / y^2 = -out / y
                            let q = zip_broadcast(av, bv, shape, |x, y| -x / (y * y));
                            zip_broadcast(&g, &q, shape, |gg, v| gg * v)
                        } else {
                            zip_broadcast(&g, av, shape, |gg, x| gg * x)
                        };
                        accumulate(&mut grads[b], reduce_to(&full, bv));
                    }
                }
                Op::Minimum(a, b) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let shape = [g.rows(), g.cols()];
                    // Ties route the gradient to the left operand.
                    let take_a =
                        zip_broadcast(av, bv, shape, |x, y| if x <= y { 1.0 } else { 0.0 });
                    if self.nodes[a].requires_grad {
                        let full = zip_broadcast(&g, &take_a, shape, |gg, m| gg * m);
                        accumulate(&mut grads[a], reduce_to(&full, av));
                    }
                    if self.nodes[b].requires_grad {
                        let full = zip_broadcast(&g, &take_a, shape, |gg, m| gg * (1.0 - m));
                        accumulate(&mut grads[b], reduce_to(&full, bv));
                    }
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    accumulate(&mut grads[a], g.map(|v| v * s));
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads[*a], g);
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    let ga =
                        zip_broadcast(&g, out, [g.rows(), g.cols()], |gg, y| gg * (1.0 - y * y));
                    accumulate(&mut grads[*a], ga);
                }
                Op::Mish(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = zip_broadcast(&g, x, [g.rows(), g.cols()], |gg, v| gg * mish_grad(v));
                    accumulate(&mut grads[*a], ga);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga =
                        zip_broadcast(
                            &g,
                            x,
                            [g.rows(), g.cols()],
                            |gg, v| if v > 0.0 { gg } else { 0.0 },
                        );
                    accumulate(&mut grads[*a], ga);
                }
                Op::Exp(a) => {
                    let ga = zip_broadcast(&g, &node.value, [g.rows(), g.cols()], |gg, y| gg * y);
                    accumulate(&mut grads[*a], ga);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = zip_broadcast(&g, x, [g.rows(), g.cols()], |gg, v| 2.0 * gg * v);
                    accumulate(&mut grads[*a], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let x = &self.nodes[*a].value;
                    let ga = zip_broadcast(&g, x, [g.rows(), g.cols()], |gg, v| {
                        if v < lo || v > hi {
                            0.0
                        } else {
                            gg
                        }
                    });
                    accumulate(&mut grads[*a], ga);
                }
                Op::SumCols(a) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let gr = g.at(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sum(a) => {
                    let x = &self.nodes[*a].value;
                    accumulate(&mut grads[*a], Tensor::full(x.rows(), x.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    let v = g.item() / x.len() as f64;
                    accumulate(&mut grads[*a], Tensor::full(x.rows(), x.cols(), v));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols();
                        if self.nodes[p].requires_grad {
                            let mut gp = Tensor::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                            }
                            accumulate(&mut grads[p], gp);
                        }
                        off += pc;
                    }
                }
            }
            // Interior node: its gradient has been pushed to its inputs.
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !keep {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if !g.is_finite() {
                    return Err(Error::NonFinite("gradient".into()));
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}
