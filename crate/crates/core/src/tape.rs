//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] records every operation in execution order, so the node list
//! is already topologically sorted and [`GradTape::backward`] is a single
//! reverse sweep. Parameters are borrowed, not copied, which lets the same tape
//! serve plain inference as well as training.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        moments: Vec<(f32, f32)>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ReplaceRow {
        x: Var,
        row: usize,
    },
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered operation log with lazily allocated gradient buffers.
#[derive(Debug)]
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
    check_finite: bool,
}

impl Default for GradTape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when `var` does not require a gradient or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Tensor::new(self.shapes[var.0].clone(), g.clone()).ok()
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0)?.as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(var.0)?.take()
    }
}

impl<'a> GradTape<'a> {
    /// Finite checks default to on in debug builds and off in release builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf that borrows its value.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Untracked leaf that borrows its value.
    pub fn input(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite {
            value.ensure_finite(name)?;
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(var).shape() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: Vec::new(),
            }),
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(self.shape_err("add_row", a, row));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add_row", t, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f32>();
        self.push("sum", Tensor::new(vec![1], vec![s])?, Op::Sum(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).gelu_unchecked();
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let (vx, g, b) = (self.value(x), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; vx.numel()];
        let mut moments = Vec::with_capacity(vx.rows());
        for (row, y) in vx.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, rstd) = tensor::row_moments(row, eps);
            for j in 0..d {
                y[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            moments.push((mean, rstd));
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                moments,
            },
            &[x, gain, bias],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(va.cols()) {
            tensor::softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Gathers rows `ids` of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "embedding")?;
        let vt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding row",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "gather_rows")?;
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    what: "gather row",
                    index: r,
                    limit: m,
                });
            }
            data.extend_from_slice(vx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], data)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Copy of `x` with row `row` overwritten by `value`. The overwritten row
    /// receives no gradient; `value` is treated as a constant.
    pub fn replace_row(&mut self, x: Var, row: usize, value: &[f32]) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "replace_row")?;
        if row >= m {
            return Err(Error::Index {
                what: "patched row",
                index: row,
                limit: m,
            });
        }
        if value.len() != d {
            return Err(Error::Shape {
                op: "replace_row",
                lhs: vec![d],
                rhs: vec![value.len()],
            });
        }
        let mut data = self.value(x).data().to_vec();
        data[row * d..(row + 1) * d].copy_from_slice(value);
        let t = Tensor::new(vec![m, d], data)?;
        self.push("replace_row", t, Op::ReplaceRow { x, row }, &[x])
    }

    /// Fused multi-head causal self-attention.
    ///
    /// `qkv` is `[n, 3d]` with queries, keys and values side by side. Each
    /// range in `segments` is an independent sequence; a row attends to rows
    /// of its own segment at or before itself.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        heads: usize,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        self.causal_attention_masked(qkv, heads, segments, &[])
    }

    /// [`causal_attention`](Self::causal_attention) with additional blocked
    /// `(query_row, key_row)` edges. A row may never block itself.
    pub fn causal_attention_masked(
        &mut self,
        qkv: Var,
        heads: usize,
        segments: &[Range<usize>],
        blocked: &[(usize, usize)],
    ) -> Result<Var> {
        if let Some(&(q, k)) = blocked.iter().find(|(q, k)| q == k) {
            return Err(Error::Contract(format!(
                "attention row {q} cannot block itself (key {k})"
            )));
        }
        let mut blocked = blocked.to_vec();
        blocked.sort_unstable();
        let (n, width) = self.matrix_dims(qkv, "causal_attention")?;
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(Error::Contract(format!(
                "qkv width {width} is not divisible into 3 x {heads} heads"
            )));
        }
        let mut covered = 0;
        for seg in segments {
            if seg.start != covered || seg.end <= seg.start || seg.end > n {
                return Err(Error::Contract(format!(
                    "attention segments must tile 0..{n}, got {seg:?}"
                )));
            }
            covered = seg.end;
        }
        if covered != n {
            return Err(Error::Contract(format!(
                "attention segments cover {covered} of {n} rows"
            )));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / math::sqrtf(dh as f32);
        let src = self.value(qkv).data();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for t in seg.clone() {
                    let q = &src[t * width + qo..t * width + qo + dh];
                    scores.clear();
                    for j in seg.start..=t {
                        if !blocked.is_empty() && blocked.binary_search(&(t, j)).is_ok() {
                            scores.push(f32::NEG_INFINITY);
                        } else {
                            scores.push(
                                tensor::dot(q, &src[j * width + ko..j * width + ko + dh]) * scale,
                            );
                        }
                    }
                    tensor::softmax_in_place(&mut scores);
                    let o = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
                    for (j, &p) in (seg.start..=t).zip(scores.iter()) {
                        tensor::axpy(p, &src[j * width + vo..j * width + vo + dh], o);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(
            "causal_attention",
            t,
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[qkv],
        )
    }

    /// Mean negative log-softmax probability of `targets`, one per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![b, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                limit: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f32;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            total += tensor::log_sum_exp(row) - row[t];
            tensor::softmax_in_place(row);
        }
        let loss = Tensor::new(vec![1], vec![total / b as f32])?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let acc = |v: Var, grads: &mut [Option<Vec<f32>>]| -> Option<usize> {
            if !wants(v) {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.numel()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&nodes[a.0].value);
                let n = nodes[b.0].value.cols();
                if let Some(ia) = acc(*a, grads) {
                    let buf = grads[ia].as_mut().unwrap();
                    tensor::matmul_nt(g, nodes[b.0].value.data(), buf, m, n, k);
                }
                if let Some(ib) = acc(*b, grads) {
                    let buf = grads[ib].as_mut().unwrap();
                    tensor::matmul_tn(nodes[a.0].value.data(), g, buf, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(i) = acc(*v, grads) {
                        add_into(grads[i].as_mut().unwrap(), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(i) = acc(*a, grads) {
                    add_into(grads[i].as_mut().unwrap(), g);
                }
                if let Some(i) = acc(*row, grads) {
                    let buf = grads[i].as_mut().unwrap();
                    for chunk in g.chunks_exact(buf.len()) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(a, b), (b, a)] {
                    if let Some(i) = acc(*x, grads) {
                        let other = nodes[y.0].value.data();
                        let buf = grads[i].as_mut().unwrap();
                        for ((o, gv), ov) in buf.iter_mut().zip(g).zip(other) {
                            *o += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(i) = acc(*a, grads) {
                    for (o, gv) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(i) = acc(*a, grads) {
                    for o in grads[i].as_mut().unwrap().iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(i) = acc(*a, grads) {
                    let x = nodes[a.0].value.data();
                    for ((o, gv), &xv) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(x) {
                        *o += gv * tensor::gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                moments,
            } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                if let Some(i) = acc(*gain, grads) {
                    let buf = grads[i].as_mut().unwrap();
                    for ((row, gr), &(mean, rstd)) in
                        xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(moments)
                    {
                        for j in 0..d {
                            buf[j] += gr[j] * (row[j] - mean) * rstd;
                        }
                    }
                }
                if let Some(i) = acc(*bias, grads) {
                    let buf = grads[i].as_mut().unwrap();
                    for gr in g.chunks_exact(d) {
                        add_into(buf, gr);
                    }
                }
                if let Some(i) = acc(*x, grads) {
                    let buf = grads[i].as_mut().unwrap();
                    let mut dxhat = vec![0.0f32; d];
                    for (r, (row, gr)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let (mean, rstd) = moments[r];
                        let mut s1 = 0.0f32;
                        let mut s2 = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * (row[j] - mean) * rstd;
                        }
                        let (m1, m2) = (s1 / d as f32, s2 / d as f32);
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            out[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(i) = acc(*a, grads) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let buf = grads[i].as_mut().unwrap();
                    for ((yr, gr), out) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(buf.chunks_exact_mut(cols))
                    {
                        let s = tensor::dot(yr, gr);
                        for j in 0..cols {
                            out[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(i) = acc(*table, grads) {
                    let d = nodes[table.0].value.cols();
                    let buf = grads[i].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(i) = acc(*x, grads) {
                    let d = nodes[x.0].value.cols();
                    let buf = grads[i].as_mut().unwrap();
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut buf[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ReplaceRow { x, row } => {
                if let Some(i) = acc(*x, grads) {
                    let d = nodes[x.0].value.cols();
                    let buf = grads[i].as_mut().unwrap();
                    for (r, (o, gr)) in buf.chunks_exact_mut(d).zip(g.chunks_exact(d)).enumerate() {
                        if r != *row {
                            add_into(o, gr);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                if let Some(i) = acc(*qkv, grads) {
                    let src = nodes[qkv.0].value.data();
                    let width = nodes[qkv.0].value.cols();
                    let buf = grads[i].as_mut().unwrap();
                    attention_backward(src, width, *heads, segments, probs, g, buf);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(i) = acc(*logits, grads) {
                    let v = nodes[logits.0].value.cols();
                    let scale = g[0] / targets.len() as f32;
                    let buf = grads[i].as_mut().unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * v..(r + 1) * v];
                        let out = &mut buf[r * v..(r + 1) * v];
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            out[j] += (p[j] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn attention_backward(
    src: &[f32],
    width: usize,
    heads: usize,
    segments: &[Range<usize>],
    probs: &[f32],
    g: &[f32],
    dsrc: &mut [f32],
) {
    let d = width / 3;
    let dh = d / heads;
    let scale = 1.0 / math::sqrtf(dh as f32);
    let mut cursor = 0;
    let mut dp = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for t in seg.clone() {
                let len = t - seg.start + 1;
                let p = &probs[cursor..cursor + len];
                cursor += len;
                let go = &g[t * d + h * dh..t * d + (h + 1) * dh];
                dp.clear();
                for j in seg.start..=t {
                    dp.push(tensor::dot(go, &src[j * width + vo..j * width + vo + dh]));
                }
                let s = tensor::dot(p, &dp);
                for (idx, j) in (seg.start..=t).enumerate() {
                    tensor::axpy(p[idx], go, &mut dsrc[j * width + vo..j * width + vo + dh]);
                    let ds = p[idx] * (dp[idx] - s) * scale;
                    if ds != 0.0 {
                        let (k_row, q_row) = (j * width + ko, t * width + qo);
                        for c in 0..dh {
                            dsrc[q_row + c] += ds * src[k_row + c];
                        }
                        for c in 0..dh {
                            dsrc[k_row + c] += ds * src[q_row + c];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    pub(crate) fn gelu_unchecked(&self) -> Tensor {
        let data = self.data().iter().map(|&x| tensor::gelu(x)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("shape preserved")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let mut tape = GradTape::new();
        let wv = tape.param(&w);
        let loss = tape.sum(wv).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(wv).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let w = Tensor::vector(vec![1.0, -2.0, 0.25]).unwrap();
        let mut tape = GradTape::new();
        let wv = tape.param(&w);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(wv).unwrap().data(), w.data());
    }

    #[test]
    fn unreachable_params_have_no_grad() {
        let a = Tensor::ones(&[2]);
        let b = Tensor::ones(&[2]);
        let mut tape = GradTape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let loss = tape.sum(av).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(bv).is_none());
        assert!(g.get(av).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let a = Tensor::ones(&[2]);
        let mut tape = GradTape::new();
        let av = tape.param(&a);
        assert!(matches!(tape.backward(av), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let a = Tensor::ones(&[2, 2]);
        let mut tape = GradTape::new();
        let av = tape.input(&a);
        let s = tape.sum(av).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(av).is_none());
    }

    #[test]
    fn finite_checks_report_the_op() {
        let a = Tensor::vector(vec![f32::MAX, f32::MAX]).unwrap();
        let mut tape = GradTape::new().with_finite_checks(true);
        let av = tape.input(&a);
        assert_eq!(tape.sum(av), Err(Error::NonFinite { op: "sum" }));
    }

    #[test]
    fn attention_rejects_bad_segments() {
        let a = Tensor::zeros(&[3, 6]);
        let mut tape = GradTape::new();
        let av = tape.input(&a);
        assert!(tape.causal_attention(av, 1, &[0..2]).is_err());
        assert!(tape.causal_attention(av, 4, &[0..3]).is_err());
        assert!(tape.causal_attention(av, 1, &[0..3]).is_ok());
    }
}
