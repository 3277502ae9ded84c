//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every forward operation as a node that owns its output
//! value. Nodes are appended in execution order, which is already a
//! topological order, so [`Tape::backward`] simply walks the node list in
//! reverse and accumulates gradients additively at fan-out points.
//!
//! Tensors flowing through the tape are matrices whose rows are tokens; a
//! minibatch is represented by stacking the token rows of all samples and
//! describing per-sample boundaries with [`Segment`]s, which only attention
//! needs to know about.

pub mod kernels;
pub mod optim;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{gelu_with_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows that attends only within itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// `count` back-to-back segments of equal length.
    pub fn uniform(count: usize, len: usize) -> Vec<Segment> {
        (0..count)
            .map(|i| Segment {
                start: i * len,
                len,
            })
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu { x: Var, slope: Vec<f64> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    MaskedMse {
        pred: Var,
        target: Tensor,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Order in which [`Tape::backward_with_order`] visits nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardOrder {
    /// Reverse creation order.
    Reverse,
    /// Reverse post-order of a depth-first search from the loss.
    DepthFirst,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(dim_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        if c > 0 {
            for row in out.data_mut().chunks_exact_mut(c) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut slope = Vec::with_capacity(xv.len());
        for &v in xv.data() {
            let (y, dy) = gelu_with_grad(v);
            out.push(y);
            slope.push(dy);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x, slope }, rg, "gelu")
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(dim_err("layer_norm", xv, gv));
        }
        let r = if c == 0 { 0 } else { xv.len() / c };
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = xv.clone();
        let mut buf = vec![0.0; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..axis_len {
                    buf[a] = xv.data()[(o * axis_len + a) * inner + i];
                }
                softmax_in_place(&mut buf);
                for a in 0..axis_len {
                    out.data_mut()[(o * axis_len + a) * inner + i] = buf[a];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
            "softmax",
        )
    }

    /// Multi-head scaled dot-product attention, `softmax(q kᵀ / sqrt(d_h)) v`
    /// per head, computed independently inside each segment. Inputs are
    /// already projected; heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(dim_err("attention", qv, kv));
        }
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {d} is not divisible by {heads} heads"
            )));
        }
        let rows = qv.rows();
        let mut covered = 0;
        for s in segments {
            if s.start != covered {
                return Err(Error::InvalidInput("attention segments must tile the rows in order".into()));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(Error::InvalidInput(format!(
                "attention segments cover {covered} of {rows} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let probs_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; probs_len];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut off = 0;
        for s in segments {
            let n = s.len;
            for h in 0..heads {
                let col = h * dh;
                let p = &mut probs[off..off + n * n];
                for i in 0..n {
                    let qi = &qd[(s.start + i) * d + col..(s.start + i) * d + col + dh];
                    let prow = &mut p[i * n..(i + 1) * n];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(s.start + j) * d + col..(s.start + j) * d + col + dh];
                        *pj = kernels::dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(s.start + i) * d + col..(s.start + i) * d + col + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(s.start + j) * d + col..(s.start + j) * d + col + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
                off += n * n;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, laid
    /// out segment by segment, head by head, as `len x len` row-major blocks.
    pub fn attention_probs(&self, v: Var) -> Option<(&[Segment], usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                segments,
                heads,
                probs,
                ..
            } => Some((segments, *heads, probs)),
            _ => None,
        }
    }

    /// Rows of `x` picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::InvalidInput(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![index.len(), c], out)?;
        let rg = self.rg(&[x]);
        self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(dim_err("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.len() / c.max(1);
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// `mean_i w_i * -log softmax(logits_i)[label_i]`, with one weight per row.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if labels.len() != r || weights.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for i in 0..r {
            let y = labels[i];
            if y >= c {
                return Err(Error::Data(format!("label {y} out of range for {c} classes")));
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[y]);
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss /= r.max(1) as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean squared error restricted to the listed rows:
    /// `sum_{i in rows, j} (pred_ij - target_ij)^2 / (|rows| * cols)`.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, rows: &[usize]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(dim_err("masked_mse", pv, &target));
        }
        let c = pv.cols();
        let mut s = 0.0;
        for &i in rows {
            for j in 0..c {
                let d = pv.data()[i * c + j] - target.data()[i * c + j];
                s += d * d;
            }
        }
        let denom = (rows.len() * c).max(1) as f64;
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(s / denom),
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
            rg,
            "masked_mse",
        )
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_order(loss, BackwardOrder::Reverse)
    }

    pub fn backward_with_order(&self, loss: Var, order: BackwardOrder) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let visit: Vec<usize> = match order {
            BackwardOrder::Reverse => (0..=loss.0).rev().collect(),
            BackwardOrder::DepthFirst => {
                let mut post = self.post_order(loss);
                post.reverse();
                post
            }
        };
        for i in visit {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Gelu { x, .. } | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows(parts) => parts.clone(),
            Op::WeightedCrossEntropy { logits, .. } => vec![*logits],
            Op::MaskedMse { pred, .. } => vec![*pred],
        }
    }

    fn post_order(&self, root: Var) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        let mut stack = vec![(root.0, false)];
        while let Some((i, expanded)) = stack.pop() {
            if expanded {
                out.push(i);
                continue;
            }
            if seen[i] {
                continue;
            }
            seen[i] = true;
            stack.push((i, true));
            for inp in self.inputs(i).into_iter().rev() {
                if !seen[inp.0] {
                    stack.push((inp.0, false));
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accumulate(grads, *a, |da| matmul_nt_acc(gd, bv.data(), da, m, k, n));
                self.accumulate(grads, *b, |db| matmul_tn_acc(av.data(), gd, db, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &gy), &bb) in d.iter_mut().zip(gd).zip(bv) {
                        *x += gy * bb;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &gy), &aa) in d.iter_mut().zip(gd).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(p, q)| *p += q));
                let c = self.value(*b).len();
                self.accumulate(grads, *b, |d| add_rows_into(d, gd, c));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(p, q)| *p += c * q));
            }
            Op::Gelu { x, slope } => {
                self.accumulate(grads, *x, |d| {
                    for ((p, &q), &s) in d.iter_mut().zip(gd).zip(slope) {
                        *p += q * s;
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
                let gv = self.value(*gain).data();
                let c = gv.len();
                let r = rstd.len();
                self.accumulate(grads, *x, |d| {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gd[i * c + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            d[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |d| {
                    for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((p, &gy), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *p += gy * h;
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| add_rows_into(d, gd, c));
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = self.nodes[i].value.data();
                let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for n in 0..inner {
                            let at = |a: usize| (o * axis_len + a) * inner + n;
                            let dotp: f64 = (0..axis_len).map(|a| gd[at(a)] * y[at(a)]).sum();
                            for a in 0..axis_len {
                                d[at(a)] += y[at(a)] * (gd[at(a)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, gd, grads),
            Op::GatherRows { x, index } => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |d| {
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += gd[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |d| {
                        d.iter_mut().zip(&gd[off..off + n]).for_each(|(a, b)| *a += b)
                    });
                    off += n;
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|p| *p += s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let s = gd[0] / n;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|p| *p += s));
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let lv = self.value(*logits);
                let (r, c) = (lv.rows(), lv.cols());
                let s = gd[0] / r.max(1) as f64;
                self.accumulate(grads, *logits, |d| {
                    for row in 0..r {
                        let w = weights[row] * s;
                        for j in 0..c {
                            let onehot = if j == labels[row] { 1.0 } else { 0.0 };
                            d[row * c + j] += w * (probs[row * c + j] - onehot);
                        }
                    }
                });
            }
            Op::MaskedMse { pred, target, rows } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let s = 2.0 * gd[0] / (rows.len() * c).max(1) as f64;
                self.accumulate(grads, *pred, |d| {
                    for &r in rows {
                        for j in 0..c {
                            d[r * c + j] += s * (pv.data()[r * c + j] - target.data()[r * c + j]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut off = 0;
        for s in segments {
            let n = s.len;
            let mut ds = vec![0.0; n * n];
            for h in 0..heads {
                let col = h * dh;
                let p = &probs[off..off + n * n];
                let row = |r: usize| (s.start + r) * d + col;
                // dP = dO V^T, dV = P^T dO
                for i in 0..n {
                    let go = &gd[row(i)..row(i) + dh];
                    for j in 0..n {
                        let pij = p[i * n + j];
                        ds[i * n + j] = kernels::dot(go, &vd[row(j)..row(j) + dh]);
                        let dvj = &mut dv[row(j)..row(j) + dh];
                        for (x, &y) in dvj.iter_mut().zip(go) {
                            *x += pij * y;
                        }
                    }
                    // softmax backward on row i
                    let dotp: f64 = (0..n).map(|j| ds[i * n + j] * p[i * n + j]).sum();
                    for j in 0..n {
                        ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - dotp) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                for i in 0..n {
                    for j in 0..n {
                        let sij = ds[i * n + j];
                        if sij == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[row(i) + t] += sij * kd[row(j) + t];
                            dk[row(j) + t] += sij * qd[row(i) + t];
                        }
                    }
                }
                off += n * n;
            }
        }
        self.accumulate(grads, q, |g| g.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
        self.accumulate(grads, k, |g| g.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
        self.accumulate(grads, v, |g| g.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
    }
}

/// `d[j] += sum_r g[r * c + j]`.
fn add_rows_into(d: &mut [f64], g: &[f64], c: usize) {
    if c == 0 {
        return;
    }
    for row in g.chunks_exact(c) {
        for (p, &q) in d.iter_mut().zip(row) {
            *p += q;
        }
    }
}
