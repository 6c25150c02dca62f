//! Reverse-mode tape.
//!
//! A [`Tape`] records every operation in execution order; node ids are
//! therefore a topological order and [`Tape::backward`] is a single reverse
//! sweep. Tapes are built fresh for every loss evaluation and never shared
//! between threads.

use std::borrow::Cow;

use super::kernels::{self, matmul, matmul_at, matmul_at_acc, matmul_bt};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Length-aware boost applied after the attention softmax: for query row
/// `i`, the `min(remaining[i], n_keys)` strongest weights are scaled by
/// `1 + boost` and the row is renormalised.
#[derive(Clone, Debug)]
pub struct LaamSpec {
    pub remaining: Vec<usize>,
    pub boost: f64,
}

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Query `i` sees keys `0..=i` only. Requires as many queries as keys.
    pub causal: bool,
    pub laam: Option<LaamSpec>,
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    nq: usize,
    nk: usize,
    d: usize,
    /// Final attention weights, `[heads x nq x nk]`.
    weights: Vec<T>,
    /// Softmax output before boosting, multipliers and normalisers.
    boost: Option<(Vec<T>, Vec<f64>, Vec<f64>)>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scale: f64,
        probs: Vec<f64>,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients of one backward sweep, indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` for constants or leaves the loss ignores.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed leaf; trainable iff the tensor is marked with `with_grad`.
    pub fn leaf(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Owned leaf, trainable iff the tensor is marked with `with_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, rg)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape node shape")
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    /// `x[m x n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| T::of(x.f64() * c)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|v| v.f64()).sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![T::of(s)]), vec![1], Op::Sum(a), rg)
    }

    /// Embedding lookup: rows `ids` of `table[V x d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TargetOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = Vec::with_capacity(m * n);
        let mut stats = Vec::with_capacity(m);
        let (g, b) = (self.value(gamma), self.value(beta));
        for row in self.value(x).chunks_exact(n) {
            let (mean, rstd) = kernels::row_moments(row, eps);
            stats.push((mean, rstd));
            for j in 0..n {
                let xhat = (row[j].f64() - mean) * rstd;
                out.push(T::of(xhat * g[j].f64() + b[j].f64()));
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| T::of(kernels::gelu(v.f64()))).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), shape, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), shape, Op::Relu(x), rg)
    }

    /// Row softmax with an optional additive mask of `0` / `-inf` entries.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = mask {
            if mask.numel() != m * n {
                return Err(mismatch("softmax_rows", self.shape(x), mask.shape()));
            }
        }
        let mut out = Vec::with_capacity(m * n);
        let mut row = vec![0.0; n];
        let mut probs = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let add = mask.map_or(0.0, |mk| mk.data()[i * n + j].f64());
                row[j] = self.value(x)[i * n + j].f64() + add;
            }
            kernels::softmax_masked(&row, &mut probs).ok_or(Error::DegenerateMask { row: i })?;
            out.extend(probs.iter().map(|&p| T::of(p)));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(x), rg))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q[nq x d]`, `k[nk x d]`, `v[nk x d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {d}", spec.heads)));
        }
        if spec.causal && nq != nk {
            return Err(mismatch("causal attention", self.shape(q), self.shape(k)));
        }
        if let Some(l) = &spec.laam {
            if l.remaining.len() != nq {
                return Err(mismatch("laam", &[l.remaining.len()], &[nq]));
            }
        }
        let heads = spec.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![T::zero(); heads * nq * nk];
        let mut boost = spec
            .laam
            .as_ref()
            .map(|_| (vec![T::zero(); heads * nq * nk], vec![1.0; heads * nq * nk], vec![1.0; heads * nq]));
        let mut out = vec![T::zero(); nq * d];
        let mut row = vec![0.0; nk];
        let mut p = vec![0.0; nk];
        for h in 0..heads {
            let qh = kernels::take_cols(self.value(q), nq, d, h * dh, dh);
            let kh = kernels::take_cols(self.value(k), nk, d, h * dh, dh);
            let vh = kernels::take_cols(self.value(v), nk, d, h * dh, dh);
            let scores = matmul_bt(&qh, &kh, nq, dh, nk);
            let wh = &mut weights[h * nq * nk..(h + 1) * nq * nk];
            for i in 0..nq {
                let len = if spec.causal { i + 1 } else { nk };
                for j in 0..nk {
                    row[j] = scores[i * nk + j].f64() * scale;
                }
                kernels::softmax_prefix(&row, len, &mut p).ok_or(Error::DegenerateMask { row: i })?;
                if let (Some(l), Some((pre, mult, z))) = (&spec.laam, boost.as_mut()) {
                    let base = (h * nq + i) * nk;
                    for j in 0..nk {
                        pre[base + j] = T::of(p[j]);
                    }
                    let (m, zz) = kernels::boost_top_k(&mut p[..len], l.remaining[i], l.boost);
                    mult[base..base + len].copy_from_slice(&m);
                    z[h * nq + i] = zz;
                }
                for j in 0..nk {
                    wh[i * nk + j] = T::of(p[j]);
                }
            }
            let oh = matmul(wh, &vh, nq, nk, dh);
            kernels::add_cols(&mut out, d, &oh, h * dh, dh);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            nq,
            nk,
            d,
            weights,
            boost,
        };
        Ok(self.push(Cow::Owned(out), vec![nq, d], Op::Attention(Box::new(saved)), rg))
    }

    /// `scale * sum_t -log softmax(logits[t])[targets[t]]`. With
    /// `scale = 1 / T` this is the mean token negative log-likelihood.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let (t, vocab) = self.dims(logits);
        if targets.len() != t {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(t * vocab);
        let mut total = 0.0;
        for (row, &target) in self.value(logits).chunks_exact(vocab).zip(targets) {
            if target >= vocab {
                return Err(Error::TargetOutOfRange { id: target, vocab });
            }
            let lse = kernels::log_sum_exp(row);
            total += lse - row[target].f64();
            probs.extend(row.iter().map(|v| (v.f64() - lse).exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![T::of(scale * total)]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only trainable leaves keep their
    /// gradients in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        for (s, &d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    /// Like [`Self::accumulate`], moving `delta` into an empty slot.
    fn accumulate_owned(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(slot) => {
                for (s, d) in slot.iter_mut().zip(delta) {
                    *s += d;
                }
            }
            None => grads[v.0] = Some(delta),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.rg(*a) {
                    let da = matmul_bt(g, self.value(*b), m, n, k);
                    self.accumulate_owned(grads, *a, da);
                }
                if self.rg(*b) {
                    match grads[b.0].as_mut() {
                        Some(slot) => matmul_at_acc(self.value(*a), g, m, k, n, slot),
                        None => grads[b.0] = Some(matmul_at(self.value(*a), g, m, k, n)),
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g);
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0f64; n];
                    for row in g.chunks_exact(n) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v.f64();
                        }
                    }
                    let db: Vec<T> = db.into_iter().map(T::of).collect();
                    self.accumulate_owned(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> = g.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect();
                self.accumulate_owned(grads, *a, da);
                self.accumulate_owned(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let da: Vec<T> = g.iter().map(|&g| T::of(g.f64() * c)).collect();
                self.accumulate_owned(grads, *a, da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                self.accumulate_owned(grads, *a, da);
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let d = self.dims(*table).1;
                    let mut dt = vec![T::zero(); self.value(*table).len()];
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        for (s, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate_owned(grads, *table, dt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => self.layer_norm_backward(*x, *gamma, *beta, stats, g, grads),
            Op::Gelu(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &x)| T::of(g.f64() * kernels::gelu_grad(x.f64())))
                    .collect();
                self.accumulate_owned(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate_owned(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let n = self.dims(*x).1;
                let mut dx = Vec::with_capacity(out.len());
                for (y, gr) in out.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let s = kernels::dot(y, gr);
                    dx.extend(y.iter().zip(gr).map(|(&y, &g)| T::of(y.f64() * (g.f64() - s))));
                }
                self.accumulate_owned(grads, *x, dx);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let vocab = self.dims(*logits).1;
                let c = g[0].f64() * scale;
                let mut dl: Vec<T> = probs.iter().map(|&p| T::of(c * p)).collect();
                for (t, &target) in targets.iter().enumerate() {
                    let i = t * vocab + target;
                    dl[i] = T::of(c * (probs[i] - 1.0));
                }
                self.accumulate_owned(grads, *logits, dl);
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &[(f64, f64)],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let n = self.dims(x).1;
        let gam = self.value(gamma);
        let mut dgamma = vec![0.0f64; n];
        let mut dbeta = vec![0.0f64; n];
        let mut dx = Vec::with_capacity(g.len());
        let mut xhat = vec![0.0f64; n];
        let mut dxhat = vec![0.0f64; n];
        for ((row, gr), &(mean, rstd)) in self.value(x).chunks_exact(n).zip(g.chunks_exact(n)).zip(stats) {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..n {
                xhat[j] = (row[j].f64() - mean) * rstd;
                let gj = gr[j].f64();
                dgamma[j] += gj * xhat[j];
                dbeta[j] += gj;
                dxhat[j] = gj * gam[j].f64();
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
            }
            m1 /= n as f64;
            m2 /= n as f64;
            dx.extend((0..n).map(|j| T::of(rstd * (dxhat[j] - m1 - xhat[j] * m2))));
        }
        self.accumulate_owned(grads, x, dx);
        let dgamma: Vec<T> = dgamma.into_iter().map(T::of).collect();
        let dbeta: Vec<T> = dbeta.into_iter().map(T::of).collect();
        self.accumulate_owned(grads, gamma, dgamma);
        self.accumulate_owned(grads, beta, dbeta);
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (nq, nk, d) = (s.nq, s.nk, s.d);
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut ds = vec![T::zero(); nq * nk];
        let mut dp = vec![0.0f64; nk];
        for h in 0..s.heads {
            let qh = kernels::take_cols(self.value(s.q), nq, d, h * dh, dh);
            let kh = kernels::take_cols(self.value(s.k), nk, d, h * dh, dh);
            let vh = kernels::take_cols(self.value(s.v), nk, d, h * dh, dh);
            let gh = kernels::take_cols(g, nq, d, h * dh, dh);
            let wh = &s.weights[h * nq * nk..(h + 1) * nq * nk];
            let dw = matmul_bt(&gh, &vh, nq, dh, nk);
            let dvh = matmul_at(wh, &gh, nq, nk, dh);
            kernels::add_cols(&mut dv, d, &dvh, h * dh, dh);
            for i in 0..nq {
                let w = &wh[i * nk..(i + 1) * nk];
                let dwi = &dw[i * nk..(i + 1) * nk];
                let p: &[T] = match &s.boost {
                    Some((pre, mult, z)) => {
                        let base = (h * nq + i) * nk;
                        let zi = z[h * nq + i];
                        let sw = kernels::dot(dwi, w);
                        for j in 0..nk {
                            dp[j] = mult[base + j] * (dwi[j].f64() - sw) / zi;
                        }
                        &pre[base..base + nk]
                    }
                    None => {
                        for j in 0..nk {
                            dp[j] = dwi[j].f64();
                        }
                        w
                    }
                };
                let sp: f64 = p.iter().zip(&dp).map(|(&p, &d)| p.f64() * d).sum();
                for j in 0..nk {
                    ds[i * nk + j] = T::of(p[j].f64() * (dp[j] - sp) * scale);
                }
            }
            let dqh = matmul(&ds, &kh, nq, nk, dh);
            let dkh = matmul_at(&ds, &qh, nq, nk, dh);
            kernels::add_cols(&mut dq, d, &dqh, h * dh, dh);
            kernels::add_cols(&mut dk, d, &dkh, h * dh, dh);
        }
        self.accumulate_owned(grads, s.q, dq);
        self.accumulate_owned(grads, s.k, dk);
        self.accumulate_owned(grads, s.v, dv);
    }
}
