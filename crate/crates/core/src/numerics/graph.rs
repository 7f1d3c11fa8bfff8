//! Tape of executed tensor ops with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value, so node order is execution order and
//! [`Graph::backward`] simply walks the node list in reverse. Gradients are accumulated
//! additively, so a node consumed by several ops receives the sum of all contributions.
//! Nodes that do not depend on any `requires_grad` leaf carry no backward work.

use super::tensor::{axis_split, softmax_strided, Tensor};
use crate::ctc;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Unfold {
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Sum(NodeId),
    /// Scalar loss with its gradient w.r.t. the input precomputed in the forward pass.
    FusedLoss {
        input: NodeId,
        grad: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Attention mask applied inside [`Graph::softmax`] on rank-2 score matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `t` may only attend to columns `0..=t`.
    Causal,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds an input tensor; it participates in backward iff `requires_grad` is set on it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, shape, &[])),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("transpose", x)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `x + bias` with `bias` broadcast over every leading index of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != bs.first() {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let n = bs[0];
        let bd = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|&v| gelu(v).0).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Softmax along `axis`. `Mask::Causal` requires a rank-2 input and the last axis;
    /// masked entries are exactly zero and their inputs are never read.
    pub fn softmax(&mut self, x: NodeId, axis: usize, mask: Mask) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        match mask {
            Mask::None => softmax_strided(xd, &mut out, outer, n, inner),
            Mask::Causal => {
                if shape.len() != 2 || axis != 1 {
                    return Err(Error::shape("causal softmax", &shape, &[]));
                }
                for r in 0..outer {
                    let valid = (r + 1).min(n);
                    let row = r * n;
                    softmax_strided(&xd[row..row + valid], &mut out[row..row + valid], 1, valid, 1);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { x, outer, n, inner }, &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("log_softmax", &shape, &[]))?;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter().map(move |v| v - lse)
            })
            .collect();
        let value = Tensor::new(shape, out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit (population) variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let xd = self.value(x).data();
        let rows = xd.len() / n.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![r, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row id {bad} out of range for table with {rows} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        self.push("gather_rows", value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// im2col over time for a 1-D convolution: row `t` concatenates input frames
    /// `t*stride - pad .. t*stride - pad + kernel`, zero outside the sequence.
    pub fn unfold_frames(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (t_in, c) = self.dims2("unfold_frames", x)?;
        if kernel == 0 || stride == 0 || t_in + 2 * pad < kernel {
            return Err(Error::shape("unfold_frames", &[t_in, c], &[kernel, stride, pad]));
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = vec![0.0; t_out * kernel * c];
        for t in 0..t_out {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    let s = src as usize;
                    let dst = t * kernel * c + j * c;
                    out[dst..dst + c].copy_from_slice(&xd[s * c..(s + 1) * c]);
                }
            }
        }
        let value = Tensor::new(vec![t_out, kernel * c], out)?;
        self.push("unfold_frames", value, Op::Unfold { x, kernel, stride, pad }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over rows of label-smoothed negative log-likelihood of `targets` under
    /// `softmax(logits)`. The smoothing target is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], smoothing: f64) -> Result<NodeId> {
        let (l, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != l {
            return Err(Error::shape("cross_entropy", &[l, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("target id {bad} outside vocabulary of {v}")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0,1)")));
        }
        let ld = self.value(logits).data();
        let mut loss = 0.0;
        let mut grad = vec![0.0; l * v];
        for (i, &target) in targets.iter().enumerate() {
            let row = &ld[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mean_nll = row.iter().map(|x| lse - x).sum::<f64>() / v as f64;
            loss += (1.0 - smoothing) * (lse - row[target]) + smoothing * mean_nll;
            for k in 0..v {
                let q = smoothing / v as f64 + if k == target { 1.0 - smoothing } else { 0.0 };
                grad[i * v + k] = ((row[k] - lse).exp() - q) / l as f64;
            }
        }
        let value = Tensor::scalar(loss / l as f64);
        self.push("cross_entropy", value, Op::FusedLoss { input: logits, grad }, &[logits])
    }

    /// Negative log-likelihood of `target` under CTC with blank as the last column of
    /// `log_probs`. Infeasible targets are an error here; callers screen them out first.
    pub fn ctc_loss(&mut self, log_probs: NodeId, target: &[usize]) -> Result<NodeId> {
        let (t, c) = self.dims2("ctc_loss", log_probs)?;
        let lp = self.value(log_probs).data();
        let fb = ctc::forward_backward(lp, t, c, target)?;
        let Some(fb) = fb else {
            return Err(Error::invalid(format!(
                "ctc target of length {} infeasible for {t} frames",
                target.len()
            )));
        };
        let value = Tensor::scalar(fb.loss);
        self.push(
            "ctc_loss",
            value,
            Op::FusedLoss {
                input: log_probs,
                grad: fb.grad,
            },
            &[log_probs],
        )
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl rand::Rng) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Propagates gradients from the scalar node `loss` back through the record and stores
    /// them on every node that requires grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let n = node.value.numel();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; n])));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |id: NodeId| nodes[id.0].value.data();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[id.0].requires_grad {
                let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
                f(slot);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                acc(*x, &mut |dx| {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = nodes[bias.0].value.numel();
                acc(*bias, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }),
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu(xv).1;
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + j;
                            let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                            for k in 0..n {
                                dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                acc(*x, &mut |dx| {
                    for r in 0..y.len() / n {
                        let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for k in r * n..(r + 1) * n {
                            dx[k] += g[k] - y[k].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.numel();
                let gd = val(*gain);
                acc(*gain, &mut |dg| {
                    for (k, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[k % n] += gv * h;
                    }
                });
                acc(*bias, &mut |db| {
                    for (k, gv) in g.iter().enumerate() {
                        db[k % n] += gv;
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, &s) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let dh: Vec<f64> = g[span.clone()].iter().zip(gd).map(|(a, b)| a * b).collect();
                        let h = &xhat[span.clone()];
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (k, d) in dx[span].iter_mut().enumerate() {
                            *d += s * (dh[k] - mean_dh - h[k] * mean_dh_h);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                let (r, w) = (out.shape()[0], out.shape()[1]);
                acc(*x, &mut |dx| {
                    for a in 0..r {
                        add_into(&mut dx[a * c + start..a * c + start + w], &g[a * w..(a + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |dp| {
                        for a in 0..r {
                            add_into(&mut dp[a * w..(a + 1) * w], &g[a * total + offset..a * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let cols = out.shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Unfold { x, kernel, stride, pad } => {
                let (t_in, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let t_out = out.shape()[0];
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                acc(*x, &mut |dx| {
                    for t in 0..t_out {
                        for j in 0..kernel {
                            let src = (t * stride + j) as isize - pad as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let s = src as usize;
                                let from = t * kernel * c + j * c;
                                add_into(&mut dx[s * c..(s + 1) * c], &g[from..from + c]);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::FusedLoss { input, grad } => acc(*input, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(grad) {
                    *d += g[0] * gv;
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// GELU value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + th), 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
}
