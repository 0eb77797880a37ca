// Copyright 2026 The tamt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every primitive appends one node holding its
//! value and whatever the backward pass needs. Nodes only reference earlier
//! nodes, so a reverse sweep over the node list is a valid topological order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Floor below which a vector is rejected by [`Graph::cosine_rows`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Default epsilon for [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// The tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn mat(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. Gradients are only tracked for leaves with
    /// `requires_grad` and for nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (mat(ta.shape()), mat(tb.shape())) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = mat(t.shape()).ok_or_else(|| shape_err("transpose", t, t))?;
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.cols();
        if tr.numel() != n {
            return Err(shape_err("add_row", tx, tr));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).unwrap();
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect()).unwrap();
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * std_normal_cdf(v)).collect();
        let value = Tensor::new(t.shape(), data).unwrap();
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            softmax_into(row, &mut out);
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Standardizes along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let (g, b) = (tg.data(), tb.data());
        let rows = tx.numel() / d;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, classes) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut total = 0.0;
        let mut count = 0;
        for (row, target) in t.data().chunks(classes).zip(targets) {
            let start = probs.len();
            softmax_into(row, &mut probs);
            if let Some(c) = *target {
                if c >= classes {
                    return Err(Error::ClassOutOfRange { index: c, classes });
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                total += lse - row[c];
                count += 1;
            }
            debug_assert_eq!(probs.len() - start, classes);
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Row-wise cosine similarity of two `m×d` tensors, giving a length-`m` vector.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine", ta, tb));
        }
        let d = ta.cols();
        let mut norm_a = Vec::new();
        let mut norm_b = Vec::new();
        let mut out = Vec::new();
        for (ra, rb) in ta.data().chunks(d).zip(tb.data().chunks(d)) {
            let na = libm::sqrt(ra.iter().map(|v| v * v).sum::<f64>());
            let nb = libm::sqrt(rb.iter().map(|v| v * v).sum::<f64>());
            for n in [na, nb] {
                if !(n >= COSINE_NORM_FLOOR) {
                    return Err(Error::DegenerateVector(n));
                }
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
            },
            &[a, b],
        ))
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.cosine_rows(a, b)?;
        if self.value(c).numel() != 1 {
            let (ta, tb) = (self.value(a), self.value(b));
            return Err(shape_err("cosine", ta, tb));
        }
        Ok(c)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::ClassOutOfRange { index: id, classes: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = mat(t.shape()).ok_or_else(|| shape_err("slice_cols", t, t))?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", t, t));
        }
        let out = t.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let value = Tensor::matrix(r, len, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = mat(t.shape()).ok_or_else(|| shape_err("slice_rows", t, t))?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", t, t));
        }
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, out)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::Empty("concat input"))?);
        let r = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if mat(t.shape()).is_none() || t.rows() != r {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(r, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::Empty("concat input"))?);
        let c = first.cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if mat(t.shape()).is_none() || t.cols() != c {
                return Err(shape_err("concat_rows", first, t));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / c;
        let value = Tensor::matrix(rows, c, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every `requires_grad` leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Accumulates a contribution into `grads[v]` if `v` needs it.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| gemm_nt_acc(g, tb.data(), ga, m, k, n));
                acc(*b, &mut |gb| gemm_tn_acc(ta.data(), g, gb, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddRow(x, row) => {
                let n = out.cols();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }),
            Op::AddScalar(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Gelu(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gv * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gd = nodes[gain.0].value.data();
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gv * h;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let rows = g.chunks(d).zip(xhat.chunks(d)).zip(inv_std).zip(gx.chunks_mut(d));
                    for (((gr, hr), &r), gxr) in rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            gxr[j] += r * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(c) = *t else { continue };
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (j, o) in row.iter_mut().enumerate() {
                            let p = probs[r * classes + j];
                            *o += scale * (p - if j == c { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::CosineRows { a, b, norm_a, norm_b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let d = ta.cols();
                let cos = out.data();
                let mut side = |this: Var, this_t: &Tensor, other_t: &Tensor, n_this: &[f64], n_other: &[f64]| {
                    acc(this, &mut |gt| {
                        for r in 0..cos.len() {
                            let (x, y) = (this_t.row(r), other_t.row(r));
                            let inv = 1.0 / (n_this[r] * n_other[r]);
                            let c_over = cos[r] / (n_this[r] * n_this[r]);
                            for j in 0..d {
                                gt[r * d + j] += g[r] * (y[j] * inv - c_over * x[j]);
                            }
                        }
                    });
                };
                side(*a, ta, tb, norm_a, norm_b);
                side(*b, tb, ta, norm_b, norm_a);
            }
            Op::GatherRows { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (w, c) = (out.cols(), nodes[x.0].value.cols());
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + w], gr);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for (r, gr) in gp.chunks_mut(w).enumerate() {
                            add_into(gr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = libm::exp(v - max);
        total += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= total;
    }
}

/// Largest relative discrepancy between `analytic` and central differences
/// of `f` around `x`, using `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_rel_error(analytic: &[f64], x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Checks the gradient of a scalar graph function at `x` against central
/// differences with step `h`. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut failure = None;
    let err = max_rel_error(&analytic, x.data(), h, |probe| {
        let mut g = Graph::new();
        let t = Tensor::new(x.shape(), probe.to_vec()).expect("same shape");
        let xv = g.leaf(t, false);
        match f(&mut g, xv) {
            Ok(l) => g.value(l).item(),
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}
