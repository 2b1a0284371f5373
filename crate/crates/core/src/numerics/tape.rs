//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for tracked leaves. Only the ops the backbone uses
//! are provided; each one checks shapes eagerly and reports both operands
//! on mismatch.

use crate::error::{Error, Result};

use super::real::{gemm, Real, Strided};
use super::tensor::{softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

enum Op<F> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        b: Var,
    },
    Scale(Var, F),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MaskRows {
        x: Var,
        mask: Vec<F>,
    },
    Permute {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Mse {
        pred: Var,
        target: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf whose gradient is accumulated by `backward`.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attention weights `[batch, heads, q_len, kv_len]` recorded by an
    /// [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let qs = self.shape(*q);
                let ks = self.shape(*k);
                Tensor::new(vec![qs[0], *heads, qs[1], ks[1]], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Affine map over the last axis: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [dout] {
                return Err(Error::dim("linear bias", &ws, bs));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![F::zero(); rows * dout];
        gemm(
            F::one(),
            self.value(x).data(),
            Strided::rows(0, rows, din),
            self.value(w).data(),
            Strided::rows(0, din, dout),
            F::zero(),
            &mut out,
            Strided::rows(0, rows, dout),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Adds `b` tiled over the leading axes of `x`; `b`'s shape must equal
    /// the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::dim("add_broadcast", xs, bs));
        }
        let n = self.value(b).numel();
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(value, Op::AddBroadcast { x, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, factor), tracked)
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::from_f64_lossy(LN_EPS);
        let nf = F::from_usize(n).unwrap();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x).data();
        let rows = xv.len() / n.max(1);
        let mut out = vec![F::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rstd = (var + eps).sqrt().recip();
            for i in 0..n {
                orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            tracked,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_value);
        let tracked = self.tracked(x);
        self.push(value, Op::Gelu(x), tracked)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = super::tensor::softmax_rows(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::Softmax(x), tracked)
    }

    /// Scaled dot-product attention split over `heads`.
    ///
    /// `q` is `[batch, q_len, d]`, `k` and `v` are `[batch, kv_len, d]`.
    /// Scores are scaled by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::dim("attention", &qs, &ks));
        }
        let (batch, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); batch * heads * lq * lk];
        let mut out = vec![F::zero(); batch * lq * d];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for bi in 0..batch {
            for h in 0..heads {
                let p_off = (bi * heads + h) * lq * lk;
                let q_view = Strided::with_stride(bi * lq * d + h * dh, lq, dh, d);
                let k_view = Strided::with_stride(bi * lk * d + h * dh, lk, dh, d);
                let p_view = Strided::rows(p_off, lq, lk);
                gemm(scale, qv, q_view, kv, k_view.t(), F::zero(), &mut probs, p_view);
                if lk > 0 {
                    for row in probs[p_off..p_off + lq * lk].chunks_mut(lk) {
                        softmax_in_place(row);
                    }
                }
                gemm(F::one(), &probs, p_view, vv, k_view, F::zero(), &mut out, q_view);
            }
        }
        let value = Tensor::new(qs, out)?;
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            tracked,
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat axis", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::dim("narrow", &xs, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&xs, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, tracked))
    }

    /// Row lookup into a `[rows, width]` table; output is `out_shape`
    /// (whose last axis must be `width`).
    pub fn gather(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("gather table", &ts, out_shape));
        }
        let width = ts[1];
        let numel: usize = out_shape.iter().product();
        if out_shape.last() != Some(&width) || numel != ids.len() * width {
            return Err(Error::dim("gather", &ts, out_shape));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::Data(format!(
                "row id {bad} out of range for table with {} rows",
                ts[0]
            )));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(numel);
        for &i in ids {
            out.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::new(out_shape.to_vec(), out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Multiplies each last-axis row by a constant factor.
    pub fn mask_rows(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        let n = self.value(x).last_dim();
        if mask.len() * n != self.value(x).numel() {
            return Err(Error::dim("mask_rows", self.shape(x), &[mask.len()]));
        }
        let mut value = self.value(x).clone();
        for (row, &m) in value.data_mut().chunks_mut(n).zip(&mask) {
            for v in row {
                *v = *v * m;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::MaskRows { x, mask }, tracked))
    }

    /// `out[i] = x[index[i]]` with `index` a permutation of `x`'s elements.
    pub fn permute(&mut self, x: Var, index: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if index.len() != n || out_shape.iter().product::<usize>() != n {
            return Err(Error::dim("permute", self.shape(x), out_shape));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::new(out_shape.to_vec(), data)?,
            Op::Permute { x, index },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mse", self.shape(pred), target.shape()));
        }
        let n = F::from_usize(target.numel().max(1)).unwrap();
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(total), Op::Sum(x), tracked)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward root", self.shape(root), &[1]));
        }
        self.backward_with(root, vec![F::one()])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Vec<F>) -> Result<Gradients<F>> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::dim("backward seed", self.shape(root), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if let Some(dx) = self.acc(grads, *x) {
                    gemm(
                        F::one(),
                        g,
                        Strided::rows(0, rows, dout),
                        self.value(*w).data(),
                        Strided::rows(0, din, dout).t(),
                        F::one(),
                        dx,
                        Strided::rows(0, rows, din),
                    );
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(
                        F::one(),
                        self.value(*x).data(),
                        Strided::rows(0, rows, din).t(),
                        g,
                        Strided::rows(0, rows, dout),
                        F::one(),
                        dw,
                        Strided::rows(0, din, dout),
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        for (d, &gv) in d.iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let n = db.len();
                    for chunk in g.chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + gv * *factor;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = self.value(*x).last_dim();
                let nf = F::from_usize(n).unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dxhat = vec![F::zero(); n];
                let mut xhat = vec![F::zero(); n];
                let mut dx_rows = self.tracked(*x).then(|| vec![F::zero(); xv.len()]);
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                for (r, (row, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    let (m, s) = (mean[r], rstd[r]);
                    for i in 0..n {
                        xhat[i] = (row[i] - m) * s;
                        dxhat[i] = grow[i] * gv[i];
                        dgain[i] = dgain[i] + grow[i] * xhat[i];
                        dbias[i] = dbias[i] + grow[i];
                    }
                    if let Some(dx) = dx_rows.as_mut() {
                        let mean_d = dxhat.iter().copied().sum::<F>() / nf;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / nf;
                        for i in 0..n {
                            dx[r * n + i] = s * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                        }
                    }
                }
                if let (Some(src), Some(dx)) = (dx_rows, self.acc(grads, *x)) {
                    for (d, v) in dx.iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
                if let Some(d) = self.acc(grads, *gain) {
                    for (d, v) in d.iter_mut().zip(dgain) {
                        *d = *d + v;
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for (d, v) in d.iter_mut().zip(dbias) {
                        *d = *d + v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d = *d + gv * gelu_derivative(v);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>();
                        for i in 0..n {
                            drow[i] = drow[i] + yrow[i] * (grow[i] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if let Some(dp) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                dp[dst + i] = dp[dst + i] + g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            dx[dst + i] = dx[dst + i] + g[src + i];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let width = self.shape(*table)[1];
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..width {
                            dt[id * width + c] = dt[id * width + c] + g[r * width + c];
                        }
                    }
                }
            }
            Op::MaskRows { x, mask } => {
                let n = node.value.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), &m) in dx.chunks_mut(n).zip(g.chunks(n)).zip(mask) {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv * m;
                        }
                    }
                }
            }
            Op::Permute { x, index } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&i, &gv) in index.iter().zip(g) {
                        dx[i] = dx[i] + gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let n = F::from_usize(target.len().max(1)).unwrap();
                let two = F::from_f64_lossy(2.0);
                let pv = self.value(*pred).data();
                if let Some(dp) = self.acc(grads, *pred) {
                    for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                        *d = *d + g[0] * two * (p - t) / n;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
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
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let qs = self.shape(q);
        let (batch, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = self.shape(k)[1];
        let dh = d / heads;
        let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        let mut dp = vec![F::zero(); lq * lk];
        for bi in 0..batch {
            for h in 0..heads {
                let p_off = (bi * heads + h) * lq * lk;
                let p_view = Strided::rows(p_off, lq, lk);
                let q_view = Strided::with_stride(bi * lq * d + h * dh, lq, dh, d);
                let k_view = Strided::with_stride(bi * lk * d + h * dh, lk, dh, d);
                // dV = P^T dO
                gemm(F::one(), probs, p_view.t(), g, q_view, F::one(), &mut dv, k_view);
                // dP = dO V^T
                gemm(
                    F::one(),
                    g,
                    q_view,
                    vv,
                    k_view.t(),
                    F::zero(),
                    &mut dp,
                    Strided::rows(0, lq, lk),
                );
                // dS = P * (dP - rowdot(dP, P)), folded with the score scale
                if lk > 0 {
                    for (drow, prow) in dp
                        .chunks_mut(lk)
                        .zip(probs[p_off..p_off + lq * lk].chunks(lk))
                    {
                        let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
                        for (dv_, &pv) in drow.iter_mut().zip(prow) {
                            *dv_ = pv * (*dv_ - dot) * scale;
                        }
                    }
                }
                let s_view = Strided::rows(0, lq, lk);
                gemm(F::one(), &dp, s_view, kv, k_view, F::one(), &mut dq, q_view);
                gemm(F::one(), &dp, s_view.t(), qv, q_view, F::one(), &mut dk, k_view);
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.acc(grads, var) {
                for (a, s) in acc.iter_mut().zip(src) {
                    *a = *a + s;
                }
            }
        }
    }
}

fn gelu_value<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(GELU_C);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(GELU_C);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}
