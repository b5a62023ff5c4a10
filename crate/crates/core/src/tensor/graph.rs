use std::sync::Arc;

use rand::Rng;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch*query_len × dim]`, keys and values
/// `[batch*key_len × dim]`. `key_mask[b*key_len + j]` is false for padded
/// keys. With `causal`, query `i` only sees keys `j <= i`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Box<AttentionSpec>,
        /// Softmax weights per (batch, head, query, key), before dropout.
        probs: Vec<f64>,
        /// Dropout multipliers aligned with `probs`; empty when disabled.
        mask: Vec<f64>,
    },
    /// Scalar whose gradient w.r.t. `input` was computed alongside the value.
    Precomputed {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape of primitive applications in evaluation order.
///
/// Nodes are appended as operations run, so operands always precede their
/// consumers and a reverse sweep is a valid reverse-topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of tracked leaves produced by [`Graph::backward`].
#[derive(Debug)]
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

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of one row computed as `x - logsumexp(x)`.
pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (o, x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Only `tracked` leaves receive gradients.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            needs_grad: tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Matrix product of `[m×k]` and `[k×n]` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = av.with_data(data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = av.with_data(data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Adds a length-`n` bias to every row of an `[.. × n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let n = b.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = xv.with_data(data);
        let needs = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let value = xv.with_data(xv.data().iter().map(|v| v * factor).collect());
        let needs = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = xv.with_data(xv.data().iter().map(|v| v.max(0.0)).collect());
        let needs = self.needs(&[x]);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_finite("row_softmax", xv.data())?;
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        let value = xv.with_data(out);
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::RowSoftmax(x), needs))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_finite("log_softmax", xv.data())?;
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_into(row, o);
        }
        let value = xv.with_data(out);
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), needs))
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an elementwise affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let n = xv.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normalized[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = xv.with_data(out);
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Inverted dropout: kept units are divided by the keep probability.
    /// A zero rate records nothing and returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = xv.with_data(xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect());
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Selects rows of a 2-D tensor (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (nrows, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::data(format!("row index {bad} out of range for {nrows} rows")));
        }
        if rows.is_empty() {
            return Err(Error::contract("gather_rows needs at least one row"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Scaled dot-product attention over `spec.heads` heads, with optional
    /// dropout on the attention weights.
    pub fn attention<R: Rng>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!(
                "attention dropout must lie in [0, 1), got {dropout}"
            )));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttentionSpec {
            batch: bs,
            query_len: lq,
            key_len: lk,
            heads,
            causal,
            ..
        } = *spec;
        let shape_ok = qv.shape() == [bs * lq, d]
            && kv.shape() == [bs * lk, d]
            && vv.shape() == [bs * lk, d]
            && heads > 0
            && d % heads == 0
            && spec.key_mask.len() == bs * lk
            && (!causal || lq == lk);
        if !shape_ok {
            return Err(Error::Shape {
                op: "attention",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; bs * heads * lq * lk];
        let mut scores = vec![0.0; lk];
        for b in 0..bs {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let visible = spec.key_mask[b * lk + j] && (!causal || j <= i);
                        scores[j] = if visible {
                            let krow = &kd[(b * lk + j) * d + h * dh..][..dh];
                            let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                            if !s.is_finite() {
                                return Err(Error::NonFinite("attention scores"));
                            }
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(Error::data(format!(
                            "attention query {i} of batch row {b} has no visible keys"
                        )));
                    }
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let mut total = 0.0;
                    for j in 0..lk {
                        p[j] = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        total += p[j];
                    }
                    for x in p.iter_mut() {
                        *x /= total;
                    }
                }
            }
        }
        let mask: Vec<f64> = if dropout > 0.0 {
            let keep = 1.0 - dropout;
            (0..probs.len())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        } else {
            Vec::new()
        };
        let mut out = vec![0.0; bs * lq * d];
        for b in 0..bs {
            for h in 0..heads {
                for i in 0..lq {
                    let base = ((b * heads + h) * lq + i) * lk;
                    let orow = &mut out[(b * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        let mut w = probs[base + j];
                        if !mask.is_empty() {
                            w *= mask[base + j];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(b * lk + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![bs * lq, d], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec.clone()),
                probs,
                mask,
            },
            needs,
        ))
    }

    /// Records a scalar `value` of `input` whose gradient `grad` is already
    /// known in closed form.
    pub fn scalar_with_gradient(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let n = self.value(input).numel();
        if grad.len() != n {
            return Err(Error::Shape {
                op: "scalar_with_gradient",
                left: self.value(input).shape().to_vec(),
                right: vec![grad.len()],
            });
        }
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { input, grad }, needs))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// tracked leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.needs_grad, g) {
                (Op::Leaf, true, Some(g)) => Some(node.value.with_data(g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = self.accumulate(grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accumulate(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.accumulate(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::RowSoftmax(x) => {
                let c = out.cols();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((p, gr), gxr) in out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((lp, gr), gxr) in out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            gxr[j] += gr[j] - lp[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.accumulate(grads, *gain) {
                    for (hr, gr) in normalized.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *bias) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for (r, ((hr, gr), gxr)) in normalized
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += inv_std[r] / nf * (nf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = out.cols();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                mask,
            } => self.attention_backward(*q, *k, *v, spec, probs, mask, g, grads),
            Op::Precomputed { input, grad } => {
                if let Some(gx) = self.accumulate(grads, *input) {
                    gx.iter_mut().zip(grad).for_each(|(a, b)| *a += g[0] * b);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        mask: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let (bs, lq, lk, heads) = (spec.batch, spec.query_len, spec.key_len, spec.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..bs {
            for h in 0..heads {
                for i in 0..lq {
                    let base = ((b * heads + h) * lq + i) * lk;
                    let p = &probs[base..base + lk];
                    let grow = &g[(b * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let m = if mask.is_empty() { 1.0 } else { mask[base + j] };
                        let vrow = &vd[(b * lk + j) * d + h * dh..][..dh];
                        dp[j] = m * grow.iter().zip(vrow).map(|(a, c)| a * c).sum::<f64>();
                        let w = p[j] * m;
                        if w != 0.0 {
                            let dvrow = &mut dv[(b * lk + j) * d + h * dh..][..dh];
                            dvrow.iter_mut().zip(grow).for_each(|(a, c)| *a += w * c);
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                    let qoff = (b * lq + i) * d + h * dh;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let koff = (b * lk + j) * d + h * dh;
                        for t in 0..dh {
                            dq[qoff + t] += ds * kd[koff + t];
                            dk[koff + t] += ds * qd[qoff + t];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.accumulate(grads, var) {
                gv.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
