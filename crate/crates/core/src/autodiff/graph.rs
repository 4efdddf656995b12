//! Define-then-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records primitive operations in creation order, which is a
//! topological order by construction: an operand must exist before any node
//! that uses it. [`Graph::forward`] evaluates every node against a set of
//! input bindings and the current parameter values; [`Graph::backward`]
//! propagates from a scalar node and accumulates into the gradients of
//! trainable parameters. Nodes appended after a forward pass can be evaluated
//! with [`Graph::forward_pending`], which lets callers derive discrete
//! decisions (such as pseudo labels) from forward values before adding the
//! nodes that depend on them.

use super::param::{ParamId, ParamStore};
use super::tensor::{softmax_rows_unchecked, Tensor};
use crate::error::{MilError, Result};

/// Floor applied inside [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Param(ParamId),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Mul(..) => "mul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Log(_) => "log",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Log(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    input_count: usize,
    forwarded: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    /// Declares the next input slot; bindings are matched by declaration order.
    pub fn input(&mut self) -> NodeId {
        let slot = self.input_count;
        self.input_count += 1;
        self.push(Op::Input(slot))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows(a))
    }

    /// Natural log of `max(a, LOG_FLOOR)`.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// Value of a node computed by the last forward pass.
    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.values
            .get(node.0)
            .ok_or_else(|| MilError::State(format!("node #{} has not been evaluated", node.0)))
    }

    /// Evaluates every node from scratch.
    pub fn forward(&mut self, params: &ParamStore, inputs: &[Tensor]) -> Result<()> {
        if inputs.len() != self.input_count {
            return Err(MilError::shape(
                "inputs",
                format!("{} bindings for {} inputs", inputs.len(), self.input_count),
            ));
        }
        self.values.clear();
        self.requires_grad.clear();
        self.forwarded = false;
        self.evaluate_from(0, params, inputs)?;
        self.forwarded = true;
        Ok(())
    }

    /// Evaluates nodes appended since the last forward pass. Their input
    /// nodes (if any) must already have been bound by [`Graph::forward`].
    pub fn forward_pending(&mut self, params: &ParamStore) -> Result<()> {
        if !self.forwarded {
            return Err(MilError::State("forward_pending called before forward".into()));
        }
        let start = self.values.len();
        if self.ops[start..].iter().any(|op| matches!(op, Op::Input(_))) {
            return Err(MilError::State("inputs declared after forward are unbound".into()));
        }
        self.evaluate_from(start, params, &[])
    }

    fn evaluate_from(&mut self, start: usize, params: &ParamStore, inputs: &[Tensor]) -> Result<()> {
        for idx in start..self.ops.len() {
            let (value, grad) = self.eval_node(idx, params, inputs)?;
            if !value.is_finite() {
                self.values.truncate(idx);
                self.requires_grad.truncate(idx);
                return Err(MilError::InvalidValue(format!(
                    "node #{idx} ({}) produced a non-finite value",
                    self.ops[idx].name()
                )));
            }
            self.values.push(value);
            self.requires_grad.push(grad);
        }
        Ok(())
    }

    fn eval_node(&self, idx: usize, params: &ParamStore, inputs: &[Tensor]) -> Result<(Tensor, bool)> {
        let op = &self.ops[idx];
        let label = || format!("node #{idx} ({})", op.name());
        for operand in op.operands() {
            if operand.0 >= idx {
                return Err(MilError::State(format!(
                    "{}: operand #{} out of order",
                    label(),
                    operand.0
                )));
            }
        }
        let v = |n: NodeId| &self.values[n.0];
        let any_grad = op.operands().iter().any(|n| self.requires_grad[n.0]);
        let same_shape = |a: NodeId, b: NodeId| -> Result<()> {
            if v(a).shape() != v(b).shape() {
                return Err(MilError::shape(
                    label(),
                    format!("{:?} vs {:?}", v(a).shape(), v(b).shape()),
                ));
            }
            Ok(())
        };
        let row_operand = |a: NodeId, row: NodeId| -> Result<()> {
            if v(row).rows() != 1 || v(row).cols() != v(a).cols() {
                return Err(MilError::shape(
                    label(),
                    format!("row operand {:?} for {:?}", v(row).shape(), v(a).shape()),
                ));
            }
            Ok(())
        };
        let out = match op {
            Op::Input(slot) => {
                let t = inputs
                    .get(*slot)
                    .ok_or_else(|| MilError::State(format!("{}: input slot {slot} unbound", label())))?;
                return Ok((t.clone(), false));
            }
            Op::Param(id) => {
                if id.0 >= params.len() {
                    return Err(MilError::State(format!("{}: unknown parameter {}", label(), id.0)));
                }
                let p = params.get(*id);
                return Ok((p.value.clone(), p.trainable));
            }
            Op::Const(t) => return Ok((t.clone(), false)),
            Op::MatMul(a, b) => v(*a)
                .matmul(v(*b))
                .map_err(|e| MilError::shape(label(), e.to_string()))?,
            Op::Add(a, b) => {
                same_shape(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x + y)
            }
            Op::Mul(a, b) => {
                same_shape(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x * y)
            }
            Op::AddRow(a, row) => {
                row_operand(*a, *row)?;
                broadcast_rows(v(*a), v(*row), |x, y| x + y)
            }
            Op::MulRow(a, row) => {
                row_operand(*a, *row)?;
                broadcast_rows(v(*a), v(*row), |x, y| x * y)
            }
            Op::Tanh(a) => v(*a).map(f64::tanh),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Relu(a) => v(*a).map(|x| x.max(0.0)),
            Op::SoftmaxRows(a) => {
                if v(*a).cols() == 0 {
                    return Err(MilError::shape(label(), "softmax over zero columns"));
                }
                softmax_rows_unchecked(v(*a))
            }
            Op::Log(a) => v(*a).map(|x| x.max(LOG_FLOOR).ln()),
            Op::Scale(a, f) => {
                let f = *f;
                v(*a).map(|x| x * f)
            }
            Op::Sum(a) => Tensor::from_raw(1, 1, vec![v(*a).sum()]),
            Op::Mean(a) => {
                let t = v(*a);
                if t.is_empty() {
                    return Err(MilError::shape(label(), "mean of an empty tensor"));
                }
                Tensor::from_raw(1, 1, vec![t.sum() / t.len() as f64])
            }
            Op::Transpose(a) => v(*a).transpose(),
            Op::ConcatCols(parts) => {
                let rows = parts.first().map_or(0, |p| v(*p).rows());
                if parts.iter().any(|p| v(*p).rows() != rows) {
                    return Err(MilError::shape(label(), "row counts differ"));
                }
                let cols: usize = parts.iter().map(|p| v(*p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(*p).row(r));
                    }
                }
                Tensor::from_raw(rows, cols, data)
            }
        };
        Ok((out, any_grad))
    }

    /// Back-propagates from a scalar node, adding `∂loss/∂p` into the
    /// gradient of every trainable parameter the loss depends on. Gradients
    /// accumulate until the caller zeroes them.
    pub fn backward(&self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        if !self.forwarded || self.values.len() != self.ops.len() {
            return Err(MilError::State("backward called before forward".into()));
        }
        if self.values[loss.0].shape() != (1, 1) {
            return Err(MilError::shape(
                format!("node #{}", loss.0),
                "backward needs a scalar loss",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.requires_grad[idx] {
                continue;
            }
            let v = |n: &NodeId| &self.values[n.0];
            let mut send = |n: &NodeId, contribution: Tensor| {
                if !self.requires_grad[n.0] {
                    return;
                }
                match &mut grads[n.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            };
            match &self.ops[idx] {
                Op::Input(_) | Op::Const(_) => {}
                Op::Param(id) => {
                    let p = params.get_mut(*id);
                    if p.trainable {
                        p.grad.add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad[a.0] {
                        send(a, g.matmul_t(v(b)));
                    }
                    if self.requires_grad[b.0] {
                        send(b, v(a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(b, g.clone());
                    send(a, g);
                }
                Op::Mul(a, b) => {
                    send(a, g.zip_map(v(b), |x, y| x * y));
                    send(b, g.zip_map(v(a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    send(row, g.sum_rows());
                    send(a, g);
                }
                Op::MulRow(a, row) => {
                    if self.requires_grad[row.0] {
                        send(row, g.zip_map(v(a), |x, y| x * y).sum_rows());
                    }
                    send(a, broadcast_rows(&g, v(row), |x, y| x * y));
                }
                Op::Tanh(a) => {
                    let y = &self.values[idx];
                    send(a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Sigmoid(a) => {
                    let y = &self.values[idx];
                    send(a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Relu(a) => {
                    send(a, g.zip_map(v(a), |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.values[idx];
                    let cols = y.cols();
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dst = &mut out.as_mut_slice()[r * cols..(r + 1) * cols];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    send(a, out);
                }
                Op::Log(a) => {
                    send(a, g.zip_map(v(a), |gv, x| if x > LOG_FLOOR { gv / x } else { 0.0 }));
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    send(a, g.map(|x| x * f));
                }
                Op::Sum(a) => {
                    let (r, c) = v(a).shape();
                    send(a, Tensor::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = v(a).shape();
                    send(a, Tensor::filled(r, c, g.get(0, 0) / (r * c) as f64));
                }
                Op::Transpose(a) => send(a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = v(p).shape();
                        let mut piece = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            piece.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        send(p, Tensor::from_raw(rows, cols, piece));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let mut out = a.clone();
    for chunk in out.as_mut_slice().chunks_mut(cols.max(1)) {
        for (x, &y) in chunk.iter_mut().zip(row.as_slice()) {
            *x = f(*x, y);
        }
    }
    out
}
