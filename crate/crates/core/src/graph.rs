//! Tape-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order during the forward pass; backward
//! walks the tape in reverse and accumulates gradients additively over
//! fan-out. All shapes must match exactly — there is no implicit
//! broadcasting; row/column replication happens through explicit ops.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type VarId = usize;

/// Operation kinds accepted by [`Graph::apply`]. Attribute-carrying kinds
/// (convolution kernel, dropout rate, slicing windows) bundle their
/// parameters here so a single dispatch point covers every primitive.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Sqrt,
    PowI(i32),
    Scale(f64),
    ConcatCols,
    StackRows,
    MaxOverTime,
    Conv1d { kernel: usize },
    Dropout { rate: f64, active: bool },
    MeanAll,
    SumAll,
    MeanAxis0,
    BroadcastRows(usize),
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    Reshape(Vec<usize>),
    SoftmaxXent,
    Rmse,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Kind(OpKind),
    /// Dropout with its sampled mask frozen at node-creation time.
    DropoutMasked(Vec<f64>),
}

struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    dropout_rng: ChaCha8Rng,
}

/// Per-node gradients produced by [`Graph::backward`]; indexed by `VarId`.
pub type GradMap = Vec<Option<Tensor>>;

fn shape_err(kind: &str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        kind: kind.to_string(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_dropout_rng(crate::rng::stream(0, "graph-dropout"))
    }

    pub fn with_dropout_rng(rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            dropout_rng: rng,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, inputs: &[VarId]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Record one primitive. Shape rules are exact-match; violations name the
    /// kind and the offending shapes.
    pub fn apply(&mut self, kind: OpKind, inputs: &[VarId]) -> Result<VarId> {
        for &i in inputs {
            if i >= self.nodes.len() {
                return Err(Error::NodeNotInGraph(i));
            }
        }
        let value = self.forward(&kind, inputs)?;
        let rg = self.any_grad(inputs);
        let op = match &kind {
            OpKind::Dropout { rate, active } => {
                let mask = if *active {
                    let keep = 1.0 - rate;
                    let n = value.numel();
                    (0..n)
                        .map(|_| {
                            if self.dropout_rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                Op::DropoutMasked(mask)
            }
            _ => Op::Kind(kind.clone()),
        };
        // Dropout applies its mask after sampling, so recompute the value.
        let id = self.push(op, inputs.to_vec(), value, rg);
        if let Op::DropoutMasked(mask) = &self.nodes[id].op {
            if !mask.is_empty() {
                let mask = mask.clone();
                let data = self.nodes[id].value.data_mut();
                for (d, m) in data.iter_mut().zip(mask.iter()) {
                    *d *= m;
                }
            }
        }
        Ok(id)
    }

    fn forward(&self, kind: &OpKind, inputs: &[VarId]) -> Result<Tensor> {
        let arity_err = |want: usize| {
            Error::invalid(format!(
                "{kind:?} expects {want} inputs, got {}",
                inputs.len()
            ))
        };
        let t = |i: usize| &self.nodes[inputs[i]].value;
        match kind {
            OpKind::MatMul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (a, b) = (t(0), t(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err("matmul", a.shape(), b.shape()));
                }
                Ok(matmul_nn(a, b))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (a, b) = (t(0), t(1));
                if a.shape() != b.shape() {
                    let name = match kind {
                        OpKind::Add => "add",
                        OpKind::Sub => "sub",
                        _ => "mul",
                    };
                    return Err(shape_err(name, a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Relu | OpKind::Sqrt => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = t(0);
                let f: fn(f64) -> f64 = match kind {
                    OpKind::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
                    OpKind::Tanh => f64::tanh,
                    OpKind::Relu => |x| x.max(0.0),
                    _ => f64::sqrt,
                };
                let data = a.data().iter().map(|&x| f(x)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            OpKind::PowI(k) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = t(0);
                let data = a.data().iter().map(|&x| x.powi(*k)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            OpKind::Scale(c) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = t(0);
                let data = a.data().iter().map(|&x| c * x).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            OpKind::ConcatCols => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let first = t(0);
                if first.shape().len() == 1 {
                    let mut data = Vec::new();
                    for i in 0..inputs.len() {
                        let x = t(i);
                        if x.shape().len() != 1 {
                            return Err(shape_err("concat-cols", first.shape(), x.shape()));
                        }
                        data.extend_from_slice(x.data());
                    }
                    Ok(Tensor::vector(data))
                } else {
                    let rows = first.shape()[0];
                    let total: usize = inputs
                        .iter()
                        .map(|&i| self.nodes[i].value.cols())
                        .sum();
                    let mut data = vec![0.0; rows * total];
                    let mut off = 0;
                    for i in 0..inputs.len() {
                        let x = t(i);
                        if x.shape().len() != 2 || x.shape()[0] != rows {
                            return Err(shape_err("concat-cols", first.shape(), x.shape()));
                        }
                        let c = x.cols();
                        for r in 0..rows {
                            data[r * total + off..r * total + off + c]
                                .copy_from_slice(x.row(r));
                        }
                        off += c;
                    }
                    Tensor::matrix(rows, total, data)
                }
            }
            OpKind::StackRows => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let d = t(0).numel();
                let mut data = Vec::with_capacity(inputs.len() * d);
                for i in 0..inputs.len() {
                    let x = t(i);
                    if x.shape().len() != 1 || x.numel() != d {
                        return Err(shape_err("stack-rows", t(0).shape(), x.shape()));
                    }
                    data.extend_from_slice(x.data());
                }
                Tensor::matrix(inputs.len(), d, data)
            }
            OpKind::MaxOverTime => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                if x.shape().len() != 2 {
                    return Err(shape_err("max-over-time", x.shape(), &[]));
                }
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut out = x.row(0).to_vec();
                for r in 1..rows {
                    for (o, &v) in out.iter_mut().zip(x.row(r)) {
                        if v > *o {
                            *o = v;
                        }
                    }
                }
                let _ = cols;
                Ok(Tensor::vector(out))
            }
            OpKind::Conv1d { kernel } => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (x, w) = (t(0), t(1));
                if x.shape().len() != 2 || w.shape().len() != 2 {
                    return Err(shape_err("conv1d", x.shape(), w.shape()));
                }
                let (time, din) = (x.shape()[0], x.shape()[1]);
                let k = *kernel;
                if w.shape()[0] != k * din || time < k || k == 0 {
                    return Err(shape_err("conv1d", x.shape(), w.shape()));
                }
                let filters = w.shape()[1];
                let positions = time - k + 1;
                let mut out = vec![0.0; positions * filters];
                let xd = x.data();
                let wd = w.data();
                for p in 0..positions {
                    let window = &xd[p * din..p * din + k * din];
                    let orow = &mut out[p * filters..(p + 1) * filters];
                    for (j, &xv) in window.iter().enumerate() {
                        if xv != 0.0 {
                            let wrow = &wd[j * filters..(j + 1) * filters];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                Tensor::matrix(positions, filters, out)
            }
            OpKind::Dropout { rate, .. } => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::invalid(format!("dropout rate {rate} out of [0,1)")));
                }
                // Mask is applied in `apply` after the node exists.
                Ok(t(0).clone())
            }
            OpKind::MeanAll | OpKind::SumAll => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                let s: f64 = x.data().iter().sum();
                let v = if matches!(kind, OpKind::MeanAll) {
                    s / x.numel() as f64
                } else {
                    s
                };
                Ok(Tensor::scalar(v))
            }
            OpKind::MeanAxis0 => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                if x.shape().len() != 2 {
                    return Err(shape_err("mean-axis0", x.shape(), &[]));
                }
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for (o, &v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                for o in out.iter_mut() {
                    *o /= rows as f64;
                }
                Ok(Tensor::vector(out))
            }
            OpKind::BroadcastRows(n) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                if x.shape().len() != 1 {
                    return Err(shape_err("broadcast-rows", x.shape(), &[*n]));
                }
                let mut data = Vec::with_capacity(n * x.numel());
                for _ in 0..*n {
                    data.extend_from_slice(x.data());
                }
                Tensor::matrix(*n, x.numel(), data)
            }
            OpKind::SliceRows { start, len } => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                if x.shape().len() != 2 || start + len > x.shape()[0] || *len == 0 {
                    return Err(shape_err("slice-rows", x.shape(), &[*start, *len]));
                }
                let c = x.cols();
                let data = x.data()[start * c..(start + len) * c].to_vec();
                Tensor::matrix(*len, c, data)
            }
            OpKind::SliceCols { start, len } => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                if x.shape().len() != 2 || start + len > x.shape()[1] || *len == 0 {
                    return Err(shape_err("slice-cols", x.shape(), &[*start, *len]));
                }
                let (rows, c) = (x.shape()[0], x.cols());
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
                }
                Tensor::matrix(rows, *len, data)
            }
            OpKind::Reshape(shape) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let x = t(0);
                let numel: usize = shape.iter().product();
                if numel != x.numel() {
                    return Err(shape_err("reshape", x.shape(), shape));
                }
                Tensor::new(shape.clone(), x.data().to_vec())
            }
            OpKind::SoftmaxXent => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (logits, labels) = (t(0), t(1));
                if logits.shape().len() != 2
                    || labels.shape().len() != 1
                    || labels.numel() != logits.shape()[0]
                {
                    return Err(shape_err("softmax-xent", logits.shape(), labels.shape()));
                }
                if self.nodes[inputs[1]].requires_grad {
                    return Err(Error::invalid(
                        "softmax-xent labels must not require gradients",
                    ));
                }
                let (n, c) = (logits.shape()[0], logits.shape()[1]);
                let mut loss = 0.0;
                for r in 0..n {
                    let row = logits.row(r);
                    let y = labels.data()[r] as usize;
                    if y >= c {
                        return Err(Error::invalid(format!(
                            "label {y} out of range for {c} classes"
                        )));
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                    loss += lse - row[y];
                }
                Ok(Tensor::scalar(loss / n as f64))
            }
            OpKind::Rmse => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (a, b) = (t(0), t(1));
                if a.shape() != b.shape() {
                    return Err(shape_err("rmse", a.shape(), b.shape()));
                }
                let n = a.numel() as f64;
                let ss: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                Ok(Tensor::scalar((ss / n).sqrt()))
            }
        }
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// slots stay `None` for nodes the loss does not depend on or that do not
    /// require gradients.
    pub fn backward(&self, loss: VarId) -> Result<GradMap> {
        if loss >= self.nodes.len() {
            return Err(Error::NodeNotInGraph(loss));
        }
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(Error::LossNotScalar(lt.shape().to_vec()));
        }
        let mut grads: GradMap = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]).unwrap());
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || grads[id].is_none() || matches!(node.op, Op::Leaf) {
                continue;
            }
            let gy = grads[id].take().unwrap();
            self.propagate(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut GradMap, id: VarId, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: VarId, gy: &Tensor, grads: &mut GradMap) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let kind = match &node.op {
            Op::Leaf => return Ok(()),
            Op::DropoutMasked(mask) => {
                if self.nodes[ins[0]].requires_grad {
                    let g = if mask.is_empty() {
                        gy.clone()
                    } else {
                        let data = gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                        Tensor::new(gy.shape().to_vec(), data)?
                    };
                    self.accumulate(grads, ins[0], g);
                }
                return Ok(());
            }
            Op::Kind(k) => k,
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                if self.nodes[ins[0]].requires_grad {
                    self.accumulate(grads, ins[0], matmul_nt(gy, b));
                }
                if self.nodes[ins[1]].requires_grad {
                    self.accumulate(grads, ins[1], matmul_tn(a, gy));
                }
            }
            OpKind::Add => {
                self.accumulate(grads, ins[0], gy.clone());
                self.accumulate(grads, ins[1], gy.clone());
            }
            OpKind::Sub => {
                self.accumulate(grads, ins[0], gy.clone());
                let data = gy.data().iter().map(|&g| -g).collect();
                self.accumulate(grads, ins[1], Tensor::new(gy.shape().to_vec(), data)?);
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                if self.nodes[ins[0]].requires_grad {
                    let data = gy.data().iter().zip(b.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, ins[0], Tensor::new(gy.shape().to_vec(), data)?);
                }
                if self.nodes[ins[1]].requires_grad {
                    let data = gy.data().iter().zip(a.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, ins[1], Tensor::new(gy.shape().to_vec(), data)?);
                }
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Relu | OpKind::Sqrt => {
                let y = &node.value;
                let x = val(0);
                let data: Vec<f64> = match kind {
                    OpKind::Sigmoid => gy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect(),
                    OpKind::Tanh => gy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &t)| g * (1.0 - t * t))
                        .collect(),
                    OpKind::Relu => gy
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                    _ => gy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &s)| if s > 0.0 { g * 0.5 / s } else { 0.0 })
                        .collect(),
                };
                self.accumulate(grads, ins[0], Tensor::new(gy.shape().to_vec(), data)?);
            }
            OpKind::PowI(k) => {
                let x = val(0);
                let kk = *k as f64;
                let data = gy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| g * kk * v.powi(k - 1))
                    .collect();
                self.accumulate(grads, ins[0], Tensor::new(gy.shape().to_vec(), data)?);
            }
            OpKind::Scale(c) => {
                let data = gy.data().iter().map(|&g| g * c).collect();
                self.accumulate(grads, ins[0], Tensor::new(gy.shape().to_vec(), data)?);
            }
            OpKind::ConcatCols => {
                if node.value.shape().len() == 1 {
                    let mut off = 0;
                    for &i in ins {
                        let d = self.nodes[i].value.numel();
                        if self.nodes[i].requires_grad {
                            let g = Tensor::vector(gy.data()[off..off + d].to_vec());
                            self.accumulate(grads, i, g);
                        }
                        off += d;
                    }
                } else {
                    let rows = node.value.shape()[0];
                    let total = node.value.cols();
                    let mut off = 0;
                    for &i in ins {
                        let c = self.nodes[i].value.cols();
                        if self.nodes[i].requires_grad {
                            let mut data = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                data.extend_from_slice(
                                    &gy.data()[r * total + off..r * total + off + c],
                                );
                            }
                            self.accumulate(grads, i, Tensor::matrix(rows, c, data)?);
                        }
                        off += c;
                    }
                }
            }
            OpKind::StackRows => {
                let d = node.value.cols();
                for (r, &i) in ins.iter().enumerate() {
                    if self.nodes[i].requires_grad {
                        let g = Tensor::vector(gy.data()[r * d..(r + 1) * d].to_vec());
                        self.accumulate(grads, i, g);
                    }
                }
            }
            OpKind::MaxOverTime => {
                let x = val(0);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut g = vec![0.0; rows * cols];
                for c in 0..cols {
                    let mut best = 0;
                    for r in 1..rows {
                        if x.data()[r * cols + c] > x.data()[best * cols + c] {
                            best = r;
                        }
                    }
                    g[best * cols + c] = gy.data()[c];
                }
                self.accumulate(grads, ins[0], Tensor::matrix(rows, cols, g)?);
            }
            OpKind::Conv1d { kernel } => {
                let (x, w) = (val(0), val(1));
                let (_, din) = (x.shape()[0], x.shape()[1]);
                let filters = w.shape()[1];
                let positions = node.value.shape()[0];
                let k = *kernel;
                if self.nodes[ins[0]].requires_grad {
                    let mut gx = vec![0.0; x.numel()];
                    for p in 0..positions {
                        let grow = &gy.data()[p * filters..(p + 1) * filters];
                        for j in 0..k * din {
                            let wrow = &w.data()[j * filters..(j + 1) * filters];
                            let mut s = 0.0;
                            for (g, wv) in grow.iter().zip(wrow) {
                                s += g * wv;
                            }
                            gx[p * din + j] += s;
                        }
                    }
                    self.accumulate(grads, ins[0], Tensor::new(x.shape().to_vec(), gx)?);
                }
                if self.nodes[ins[1]].requires_grad {
                    let mut gw = vec![0.0; w.numel()];
                    for p in 0..positions {
                        let window = &x.data()[p * din..p * din + k * din];
                        let grow = &gy.data()[p * filters..(p + 1) * filters];
                        for (j, &xv) in window.iter().enumerate() {
                            if xv != 0.0 {
                                let wrow = &mut gw[j * filters..(j + 1) * filters];
                                for (o, &g) in wrow.iter_mut().zip(grow) {
                                    *o += xv * g;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, ins[1], Tensor::new(w.shape().to_vec(), gw)?);
                }
            }
            OpKind::Dropout { .. } => unreachable!("dropout nodes carry masks"),
            OpKind::MeanAll => {
                let x = val(0);
                let g = gy.item() / x.numel() as f64;
                self.accumulate(
                    grads,
                    ins[0],
                    Tensor::new(x.shape().to_vec(), vec![g; x.numel()])?,
                );
            }
            OpKind::SumAll => {
                let x = val(0);
                let g = gy.item();
                self.accumulate(
                    grads,
                    ins[0],
                    Tensor::new(x.shape().to_vec(), vec![g; x.numel()])?,
                );
            }
            OpKind::MeanAxis0 => {
                let x = val(0);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    data.extend(gy.data().iter().map(|&g| g / rows as f64));
                }
                self.accumulate(grads, ins[0], Tensor::matrix(rows, cols, data)?);
            }
            OpKind::BroadcastRows(n) => {
                let d = node.value.cols();
                let mut g = vec![0.0; d];
                for r in 0..*n {
                    for (o, &v) in g.iter_mut().zip(&gy.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::vector(g));
            }
            OpKind::SliceRows { start, len } => {
                let x = val(0);
                let c = x.cols();
                let mut g = vec![0.0; x.numel()];
                g[start * c..(start + len) * c].copy_from_slice(gy.data());
                self.accumulate(grads, ins[0], Tensor::new(x.shape().to_vec(), g)?);
            }
            OpKind::SliceCols { start, len } => {
                let x = val(0);
                let (rows, c) = (x.shape()[0], x.cols());
                let mut g = vec![0.0; x.numel()];
                for r in 0..rows {
                    g[r * c + start..r * c + start + len]
                        .copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, ins[0], Tensor::new(x.shape().to_vec(), g)?);
            }
            OpKind::Reshape(_) => {
                let x = val(0);
                self.accumulate(
                    grads,
                    ins[0],
                    Tensor::new(x.shape().to_vec(), gy.data().to_vec())?,
                );
            }
            OpKind::SoftmaxXent => {
                let (logits, labels) = (val(0), val(1));
                if self.nodes[ins[0]].requires_grad {
                    let (n, c) = (logits.shape()[0], logits.shape()[1]);
                    let scale = gy.item() / n as f64;
                    let mut g = vec![0.0; n * c];
                    for r in 0..n {
                        let row = logits.row(r);
                        let y = labels.data()[r] as usize;
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for j in 0..c {
                            let p = exps[j] / z;
                            g[r * c + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(grads, ins[0], Tensor::matrix(n, c, g)?);
                }
            }
            OpKind::Rmse => {
                let (a, b) = (val(0), val(1));
                let r = node.value.item();
                let n = a.numel() as f64;
                let scale = if r > 0.0 { gy.item() / (n * r) } else { 0.0 };
                if self.nodes[ins[0]].requires_grad {
                    let data = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    self.accumulate(grads, ins[0], Tensor::new(a.shape().to_vec(), data)?);
                }
                if self.nodes[ins[1]].requires_grad {
                    let data = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| scale * (y - x))
                        .collect();
                    self.accumulate(grads, ins[1], Tensor::new(b.shape().to_vec(), data)?);
                }
            }
        }
        Ok(())
    }

    // Ergonomic wrappers.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn powi(&mut self, a: VarId, k: i32) -> Result<VarId> {
        self.apply(OpKind::PowI(k), &[a])
    }
    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId> {
        self.apply(OpKind::ConcatCols, xs)
    }
    pub fn stack_rows(&mut self, xs: &[VarId]) -> Result<VarId> {
        self.apply(OpKind::StackRows, xs)
    }
    pub fn max_over_time(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::MaxOverTime, &[a])
    }
    pub fn conv1d(&mut self, x: VarId, w: VarId, kernel: usize) -> Result<VarId> {
        self.apply(OpKind::Conv1d { kernel }, &[x, w])
    }
    pub fn dropout(&mut self, a: VarId, rate: f64, active: bool) -> Result<VarId> {
        self.apply(OpKind::Dropout { rate, active }, &[a])
    }
    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::MeanAll, &[a])
    }
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::SumAll, &[a])
    }
    pub fn mean_axis0(&mut self, a: VarId) -> Result<VarId> {
        self.apply(OpKind::MeanAxis0, &[a])
    }
    pub fn broadcast_rows(&mut self, a: VarId, n: usize) -> Result<VarId> {
        self.apply(OpKind::BroadcastRows(n), &[a])
    }
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        self.apply(OpKind::SliceRows { start, len }, &[a])
    }
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        self.apply(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        self.apply(OpKind::Reshape(shape), &[a])
    }
    pub fn softmax_xent(&mut self, logits: VarId, labels: VarId) -> Result<VarId> {
        self.apply(OpKind::SoftmaxXent, &[logits, labels])
    }
    pub fn rmse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(OpKind::Rmse, &[a, b])
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b.data()[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let _ = k;
    Tensor::matrix(m, n, out).unwrap()
}

/// gy [m,n] · bᵀ [n,k] -> [m,k]
fn matmul_nt(gy: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (gy.shape()[0], gy.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = gy.row(i);
        for j in 0..k {
            let brow = b.row(j);
            let mut s = 0.0;
            for (g, bv) in grow.iter().zip(brow) {
                s += g * bv;
            }
            out[i * k + j] = s;
        }
    }
    let _ = n;
    Tensor::matrix(m, k, out).unwrap()
}

/// aᵀ [k,m] · gy [m,n] -> [k,n]
fn matmul_tn(a: &Tensor, gy: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = gy.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let grow = gy.row(i);
        for (j, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[j * n..(j + 1) * n];
                for (o, &g) in orow.iter_mut().zip(grow) {
                    *o += av * g;
                }
            }
        }
    }
    let _ = m;
    Tensor::matrix(k, n, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a_data: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
        let a = g.constant(Tensor::matrix(3, 3, a_data.clone()).unwrap());
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), a_data.as_slice());
    }

    #[test]
    fn max_over_time_single_frame() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let y = g.max_over_time(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(x ⊙ x), x = (1,2,3) → grad (2,4,6)
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[x].as_ref().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::vector(vec![5.0, 5.0]));
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        // x never feeds the loss, so its slot stays empty.
        assert!(grads[x].is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::LossNotScalar(_))));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let g = Graph::new();
        assert!(matches!(g.backward(3), Err(Error::NodeNotInGraph(3))));
    }

    #[test]
    fn shape_mismatch_names_kind_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"));
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = sum(x) + sum(x) → grad 2 everywhere
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0]), true);
        let s1 = g.sum_all(x).unwrap();
        let s2 = g.sum_all(x).unwrap();
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[x].as_ref().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5, false).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut g = Graph::with_dropout_rng(crate::rng::stream(1, "test-dropout"));
        let x = g.constant(Tensor::vector(vec![1.0; 1000]));
        let y = g.dropout(x, 0.5, true).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!((350..650).contains(&kept));
    }

    #[test]
    fn softmax_xent_matches_manual() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let labels = g.constant(Tensor::vector(vec![2.0]));
        let l = g.softmax_xent(logits, labels).unwrap();
        let z: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((g.value(l).item() - (z - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rmse_zero_iff_equal() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let r = g.rmse(a, b).unwrap();
        assert_eq!(g.value(r).item(), 0.0);
        let c = g.constant(Tensor::vector(vec![1.0, 5.0]));
        let r2 = g.rmse(a, c).unwrap();
        let r3 = g.rmse(c, a).unwrap();
        assert!(g.value(r2).item() > 0.0);
        assert_eq!(g.value(r2).item(), g.value(r3).item());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a·f + b·g) = a·grad f + b·grad g
        let (a, b) = (2.5, -0.75);
        let xv = Tensor::vector(vec![0.3, -1.2, 0.9]);
        let run = |wa: f64, wb: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), true);
            let f = {
                let sq = g.mul(x, x).unwrap();
                g.sum_all(sq).unwrap()
            };
            let h = {
                let t = g.tanh(x).unwrap();
                g.mean_all(t).unwrap()
            };
            let sf = g.scale(f, wa).unwrap();
            let sh = g.scale(h, wb).unwrap();
            let loss = g.add(sf, sh).unwrap();
            let grads = g.backward(loss).unwrap();
            grads[x].as_ref().unwrap().data().to_vec()
        };
        let combined = run(a, b);
        let gf = run(1.0, 0.0);
        let gh = run(0.0, 1.0);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * gf[i] + b * gh[i])).abs() < 1e-10);
        }
    }
}
