//! Wengert-style tape: forward values are computed eagerly and each op is
//! appended as a record; `backward` replays the records in reverse.
//!
//! Node ids are assigned in creation order, so every record's inputs precede
//! it and a single reverse sweep visits each record once.

use crate::error::{shape_err, Result, TensorError};
use crate::float::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows belonging to one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleByVector(Var, Var),
    Scale(Var, F),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ReplaceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        n_heads: usize,
        probs: Vec<F>,
    },
    Sum(Var),
    Select {
        x: Var,
        index: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when the leaf does not require grad or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn matrix_dims(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        let shape = self.value(var).shape();
        if shape.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {shape:?}")));
        }
        Ok((shape[0], shape[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}]·[{k2}x{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b))
    }

    /// `x[r×in] · w[out×in]ᵀ`, the weight stored output-major.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, d_in) = self.matrix_dims("linear", x)?;
        let (d_out, d_in2) = self.matrix_dims("linear", w)?;
        if d_in != d_in2 {
            return Err(shape_err("linear", format!("input [{r}x{d_in}] vs weight [{d_out}x{d_in2}]")));
        }
        let mut out = vec![F::zero(); r * d_out];
        F::gemm(
            r,
            d_in,
            d_out,
            self.value(x).data(),
            (d_in, 1),
            self.value(w).data(),
            (1, d_in),
            &mut out,
            false,
        );
        let rg = self.rg(&[x, w]);
        self.push("linear", Tensor::new(vec![r, d_out], out)?, rg, Op::Linear(x, w))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", value, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", value, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", value, rg, Op::Mul(a, b))
    }

    /// Multiplies every trailing row of `x` elementwise by the vector `v`.
    pub fn scale_by_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tv.shape().len() != 1 || tv.numel() != tx.cols() {
            return Err(shape_err(
                "scale_by_vector",
                format!("vector {:?} against trailing dim of {:?}", tv.shape(), tx.shape()),
            ));
        }
        let cols = tx.cols();
        let vd = tv.data();
        let data = tx.data().iter().enumerate().map(|(i, &a)| a * vd[i % cols]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, v]);
        self.push("scale_by_vector", value, rg, Op::ScaleByVector(x, v))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let value = self.value(x).map(|a| a * c);
        let rg = self.rg(&[x]);
        self.push("scale", value, rg, Op::Scale(x, c))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|a| a / (F::one() + (-a).exp()));
        let rg = self.rg(&[x]);
        self.push("silu", value, rg, Op::Silu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push("softmax_rows", value, rg, Op::SoftmaxRows(x))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ weight` over each trailing row.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: F) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let d = tx.cols();
        if tw.shape().len() != 1 || tw.numel() != d {
            return Err(shape_err("rms_norm", format!("weight {:?} for rows of {d}", tw.shape())));
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        let dn = F::of(d as f64);
        for r in 0..tx.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|&a| a * a).sum::<F>() / dn;
            let inv = F::one() / (ms + eps).sqrt();
            for (a, &w) in row.iter_mut().zip(tw.data()) {
                *a = *a * inv * w;
            }
            inv_rms.push(inv);
        }
        let rg = self.rg(&[x, weight]);
        self.push("rms_norm", out, rg, Op::RmsNorm { x, weight, inv_rms })
    }

    /// Mean token negative log-likelihood over rows with `mask[t]` set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                extent: vocab,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut probs = vec![F::zero(); rows * vocab];
        let mut total = 0.0f64;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let p = &mut probs[t * vocab..(t + 1) * vocab];
            p.copy_from_slice(tl.row(t));
            let max = p.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = p.iter().map(|&a| (a - max).exp()).sum::<F>().ln() + max;
            total += (lse - p[targets[t]]).as_f64();
            softmax_in_place(p);
        }
        let value = Tensor::scalar(F::of(total / count as f64));
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        self.push("embedding", value, rg, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let rg = self.rg(&[x]);
        self.push("slice_cols", value, rg, Op::SliceCols { x, start })
    }

    /// Copy of `x` whose columns `[start, start + cols(patch))` are overwritten
    /// by the constant `patch`. No gradient flows through replaced columns.
    pub fn replace_cols(&mut self, x: Var, start: usize, patch: &Tensor<F>) -> Result<Var> {
        let tx = self.value(x);
        let len = patch.cols();
        if patch.rows() != tx.rows() || start + len > tx.cols() {
            return Err(shape_err(
                "replace_cols",
                format!("patch {:?} at column {start} of {:?}", patch.shape(), tx.shape()),
            ));
        }
        let mut value = tx.clone();
        for r in 0..value.rows() {
            value.row_mut(r)[start..start + len].copy_from_slice(patch.row(r));
        }
        let rg = self.rg(&[x]);
        self.push("replace_cols", value, rg, Op::ReplaceCols { x, start, len })
    }

    /// Causal multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N × n_heads·d_head]`; each segment attends only
    /// within itself and only to positions at or before the query.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], n_heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() || tq.shape().len() != 2 {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if n_heads == 0 || width % n_heads != 0 {
            return Err(shape_err("attention", format!("{width} columns over {n_heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        let mut expected_start = 0;
        for s in segments {
            if s.start != expected_start || s.len == 0 {
                return Err(shape_err("attention", "segments must tile the rows in order"));
            }
            expected_start += s.len;
        }
        if covered != n {
            return Err(shape_err("attention", format!("segments cover {covered} of {n} rows")));
        }
        let dh = width / n_heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![F::zero(); n * width];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len * n_heads).sum());
        for seg in segments {
            for h in 0..n_heads {
                let col = h * dh;
                for i in 0..seg.len {
                    let qi = &qd[(seg.start + i) * width + col..][..dh];
                    let mut row = vec![F::zero(); seg.len];
                    for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(seg.start + j) * width + col..][..dh];
                        *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    let zi = &mut out[(seg.start + i) * width + col..][..dh];
                    for (j, &p) in row.iter().enumerate().take(i + 1) {
                        let vj = &vd[(seg.start + j) * width + col..][..dh];
                        for (z, &b) in zi.iter_mut().zip(vj) {
                            *z += p * b;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let value = Tensor::new(vec![n, width], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push("sum", value, rg, Op::Sum(x))
    }

    /// Scalar element at flat (row-major) `index`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.numel() {
            return Err(TensorError::Index {
                op: "select",
                index,
                extent: tx.numel(),
            });
        }
        let value = Tensor::scalar(tx.data()[index]);
        let rg = self.rg(&[x]);
        self.push("select", value, rg, Op::Select { x, index })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Only leaves that require grad and are reachable from `loss` receive a
    /// gradient. The tape itself is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: grads.into_iter().map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(loss.0 + 1);
        leaf_grads.resize_with(loss.0 + 1, || None);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Returns the gradient buffer for `var`, allocating zeros on first use,
    /// or `None` when `var` does not take gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], var: Var) -> Option<&'g mut Vec<F>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = self.slot(grads, a) {
                    F::gemm(m, n, k, g, (n, 1), tb.data(), (1, n), da, true);
                }
                if let Some(db) = self.slot(grads, b) {
                    F::gemm(k, m, n, ta.data(), (1, k), g, (n, 1), db, true);
                }
            }
            &Op::Linear(x, w) => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (r, d_in, d_out) = (tx.rows(), tx.cols(), tw.rows());
                if let Some(dx) = self.slot(grads, x) {
                    F::gemm(r, d_out, d_in, g, (d_out, 1), tw.data(), (d_in, 1), dx, true);
                }
                if let Some(dw) = self.slot(grads, w) {
                    F::gemm(d_out, r, d_in, g, (1, d_out), tx.data(), (d_in, 1), dw, true);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += x * y;
                    }
                }
            }
            &Op::ScaleByVector(x, v) => {
                let (tx, tv) = (self.value(x), self.value(v));
                let cols = tx.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gi * tv.data()[i % cols];
                    }
                }
                if let Some(dv) = self.slot(grads, v) {
                    for (i, (&gi, &xi)) in g.iter().zip(tx.data()).enumerate() {
                        dv[i % cols] += gi * xi;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
                }
            }
            &Op::Silu(x) => {
                let tx = self.value(x);
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(tx.data()) {
                        *d += gi * silu_grad(xi);
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let y = &node.value;
                let cols = y.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yi), &gi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (tx, tw) = (self.value(*x), self.value(*weight));
                let d = tx.cols();
                let dn = F::of(d as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: F = gr.iter().zip(tw.data()).zip(xr).map(|((&gi, &w), &xi)| gi * w * xi).sum();
                        let coef = inv * inv * inv * dot / dn;
                        for (((dxi, &gi), &w), &xi) in dx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(tw.data()).zip(xr) {
                            *dxi += inv * gi * w - coef * xi;
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        for ((dwi, &gi), &xi) in dw.iter_mut().zip(gr).zip(xr) {
                            *dwi += gi * xi * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / F::of(*count as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (t, (&m, &target)) in mask.iter().zip(targets).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut dl[t * vocab..(t + 1) * vocab];
                        for (d, &p) in row.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                            *d += scale * p;
                        }
                        row[target] -= scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let (cols, len) = (self.value(x).cols(), node.value.cols());
                if let Some(dx) = self.slot(grads, x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for (a, &b) in dx[r * cols + start..][..len].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::ReplaceCols { x, start, len } => {
                let cols = node.value.cols();
                if let Some(dx) = self.slot(grads, x) {
                    for (i, (a, &b)) in dx.iter_mut().zip(g).enumerate() {
                        let c = i % cols;
                        if c < start || c >= start + len {
                            *a += b;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                n_heads,
                probs,
            } => self.attention_backward([*q, *k, *v], segments, *n_heads, probs, g, grads),
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Select { x, index } => {
                if let Some(dx) = self.slot(grads, x) {
                    dx[index] += g[0];
                }
            }
        }
        Ok(())
    }

    fn attention_backward(&self, qkv: [Var; 3], segments: &[Segment], n_heads: usize, probs: &[F], g: &[F], grads: &mut [Option<Vec<F>>]) {
        let [q, k, v] = qkv;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = (tq.rows(), tq.cols());
        let dh = width / n_heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![F::zero(); n * width];
        let mut dk = vec![F::zero(); n * width];
        let mut dv = vec![F::zero(); n * width];
        let mut offset = 0;
        for seg in segments {
            let len = seg.len;
            for h in 0..n_heads {
                let col = h * dh;
                let p_block = &probs[offset..offset + len * len];
                offset += len * len;
                let mut dp = vec![F::zero(); len];
                for i in 0..len {
                    let p = &p_block[i * len..(i + 1) * len];
                    let gi = &g[(seg.start + i) * width + col..][..dh];
                    for j in 0..=i {
                        let vj = &vd[(seg.start + j) * width + col..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let dvj = &mut dv[(seg.start + j) * width + col..][..dh];
                        for (d, &a) in dvj.iter_mut().zip(gi) {
                            *d += p[j] * a;
                        }
                    }
                    let dot: F = (0..=i).map(|j| p[j] * dp[j]).sum();
                    let qi = &qd[(seg.start + i) * width + col..][..dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kd[(seg.start + j) * width + col..][..dh];
                        let dqi = &mut dq[(seg.start + i) * width + col..][..dh];
                        for (d, &a) in dqi.iter_mut().zip(kj) {
                            *d += ds * a;
                        }
                        let dkj = &mut dk[(seg.start + j) * width + col..][..dh];
                        for (d, &a) in dkj.iter_mut().zip(qi) {
                            *d += ds * a;
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(a, &b)| *a += b);
            }
        }
    }
}
