//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse and leaves gradients on every node that requires one. Nodes
//! whose inputs are all constants or frozen leaves never get a gradient
//! buffer, so frozen weights cost no backward work for their own gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::kernels::{gemm, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Sum { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape; it is differentiable iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            bail!(Dimension, "constant of shape {shape:?} with {} entries", data.len());
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shapes are consistent")
    }

    /// Adds this node's gradient (if any) into the tensor's grad slot.
    pub fn deliver_grad(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, m) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            bail!(Dimension, "matmul inner dimensions {k} vs {k2}");
        }
        let mut out = vec![T::zero(); n * m];
        gemm(self.value(a), self.value(b), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![n, m], Op::MatMul { a, b }, rg))
    }

    /// `x · wᵀ + b` for `x: N×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, fan_in) = self.matrix_dims(x, "linear input")?;
        let (fan_out, w_in) = self.matrix_dims(w, "linear weight")?;
        if fan_in != w_in {
            bail!(Dimension, "linear: input width {fan_in} vs weight width {w_in}");
        }
        let mut out = gemm_nt(self.value(x), self.value(w), rows, fan_in, fan_out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != fan_out {
                bail!(Dimension, "linear: bias of {} for {fan_out} outputs", bias.len());
            }
            for row in out.chunks_exact_mut(fan_out) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, vec![rows, fan_out], Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{what}: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(out, shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::AddScalar { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = 0.0f64;
        for &x in self.value(a) {
            acc += x.as_f64();
        }
        let rg = self.rg(&[a]);
        self.push(vec![T::from_f64(acc)], vec![1], Op::Sum { a }, rg)
    }

    /// Row-wise layer normalisation with affine scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            bail!(Dimension, "layer_norm affine parameters must have {d} entries");
        }
        let eps = T::from_f64(LN_EPS);
        let inv_d = T::one() / T::from_usize(d);
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, vec![rows, d], Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape, Op::Gelu { x }, rg)
    }

    /// Multi-head causal self-attention over `batch` sequences of `seq`
    /// positions; `q`, `k`, `v` are `(batch·seq)×d` with heads laid out as
    /// contiguous column slices.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q, "attention q")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            bail!(Dimension, "attention: q, k, v shapes differ");
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            bail!(Dimension, "attention: {rows} rows, batch {batch}, seq {seq}, {heads} heads, width {d}");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for bi in 0..batch {
            for h in 0..heads {
                let qh = gather_head(self.value(q), bi, h, seq, d, dh);
                let kh = gather_head(self.value(k), bi, h, seq, d, dh);
                let vh = gather_head(self.value(v), bi, h, seq, d, dh);
                let mut s = gemm_nt(&qh, &kh, seq, dh, seq);
                for t in 0..seq {
                    let row = &mut s[t * seq..(t + 1) * seq];
                    let mut mx = T::neg_infinity();
                    for u in 0..=t {
                        row[u] *= scale;
                        mx = mx.max(row[u]);
                    }
                    let mut z = T::zero();
                    for u in 0..=t {
                        row[u] = (row[u] - mx).exp();
                        z += row[u];
                    }
                    for u in 0..=t {
                        row[u] /= z;
                    }
                    row[t + 1..].iter_mut().for_each(|p| *p = T::zero());
                }
                let mut oh = vec![T::zero(); seq * dh];
                gemm(&s, &vh, &mut oh, seq, seq, dh);
                scatter_head(&mut out, &oh, bi, h, seq, d, dh);
                let off = (bi * heads + h) * seq * seq;
                probs[off..off + seq * seq].copy_from_slice(&s);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, vec![rows, d], Op::Attention { q, k, v, batch, seq, heads, probs }, rg))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            bail!(Data, "token id {bad} outside vocabulary of {vocab}");
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean next-token cross-entropy of `logits: N×V` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            bail!(Dimension, "cross_entropy: {} targets for {rows} rows", targets.len());
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            bail!(Data, "target id {bad} outside vocabulary of {vocab}");
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = T::zero();
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = (l - mx).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            let nll = (z.ln() + mx - row[targets[r]]).as_f64();
            total += nll;
        }
        let loss = T::from_f64(total / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Back-propagates from a scalar node. Gradients of intermediate nodes
    /// are released once consumed; leaf gradients stay readable via
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        if !self.requires_grad(loss) {
            bail!(Contract, "loss does not depend on any trainable tensor");
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let op = core::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                self.nodes[id].grad = Some(g);
                continue;
            }
            self.propagate(id, &op, &g)?;
            self.nodes[id].op = op;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert!(node.requires_grad);
        debug_assert_eq!(contrib.len(), node.value.len());
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, &c)| *b += c),
            None => node.grad = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, op: &Op<T>, g: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (n, k) = self.matrix_dims(a, "matmul")?;
                let m = self.shape(b)[1];
                if self.requires_grad(a) {
                    let da = gemm_nt(g, self.value(b), n, m, k);
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = gemm_tn(self.value(a), g, n, k, m);
                    self.accumulate(b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, fan_in) = self.matrix_dims(x, "linear")?;
                let fan_out = self.shape(w)[0];
                if self.requires_grad(x) {
                    let mut dx = vec![T::zero(); rows * fan_in];
                    gemm(g, self.value(w), &mut dx, rows, fan_out, fan_in);
                    self.accumulate(x, dx);
                }
                if self.requires_grad(w) {
                    let dw = gemm_tn(g, self.value(x), rows, fan_out, fan_in);
                    self.accumulate(w, dw);
                }
                if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.chunks_exact(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.requires_grad(b) {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.requires_grad(b) {
                    self.accumulate(b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let da = g.iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = g.iter().zip(self.value(a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Scale { a, s } => {
                if self.requires_grad(a) {
                    self.accumulate(a, g.iter().map(|&x| x * s).collect());
                }
            }
            Op::AddScalar { a } => {
                if self.requires_grad(a) {
                    self.accumulate(a, g.to_vec());
                }
            }
            Op::Sum { a } => {
                if self.requires_grad(a) {
                    let n = self.value(a).len();
                    self.accumulate(a, vec![g[0]; n]);
                }
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
                let (rows, d) = self.matrix_dims(x, "layer_norm")?;
                if self.requires_grad(gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(gamma, dg);
                }
                if self.requires_grad(beta) {
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(b, &x)| *b += x);
                    }
                    self.accumulate(beta, db);
                }
                if self.requires_grad(x) {
                    let gam = self.value(gamma);
                    let inv_d = T::one() / T::from_usize(d);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::Gelu { x } => {
                if self.requires_grad(x) {
                    let dx = g.iter().zip(self.value(x)).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                    self.accumulate(x, dx);
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, ref probs } => {
                let d = self.shape(q)[1];
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).sqrt();
                let rows = batch * seq;
                let (need_q, need_k, need_v) =
                    (self.requires_grad(q), self.requires_grad(k), self.requires_grad(v));
                let mut dq = vec![T::zero(); if need_q { rows * d } else { 0 }];
                let mut dk = vec![T::zero(); if need_k { rows * d } else { 0 }];
                let mut dv = vec![T::zero(); if need_v { rows * d } else { 0 }];
                for bi in 0..batch {
                    for h in 0..heads {
                        let off = (bi * heads + h) * seq * seq;
                        let p = &probs[off..off + seq * seq];
                        let doh = gather_head(g, bi, h, seq, d, dh);
                        if need_v {
                            let dvh = gemm_tn(p, &doh, seq, seq, dh);
                            scatter_head(&mut dv, &dvh, bi, h, seq, d, dh);
                        }
                        if !(need_q || need_k) {
                            continue;
                        }
                        let vh = gather_head(self.value(v), bi, h, seq, d, dh);
                        let mut ds = gemm_nt(&doh, &vh, seq, dh, seq);
                        for t in 0..seq {
                            let pr = &p[t * seq..(t + 1) * seq];
                            let dr = &mut ds[t * seq..(t + 1) * seq];
                            let mut dot = T::zero();
                            for u in 0..=t {
                                dot += pr[u] * dr[u];
                            }
                            for u in 0..=t {
                                dr[u] = pr[u] * (dr[u] - dot) * scale;
                            }
                            dr[t + 1..].iter_mut().for_each(|x| *x = T::zero());
                        }
                        if need_q {
                            let kh = gather_head(self.value(k), bi, h, seq, d, dh);
                            let mut dqh = vec![T::zero(); seq * dh];
                            gemm(&ds, &kh, &mut dqh, seq, seq, dh);
                            scatter_head(&mut dq, &dqh, bi, h, seq, d, dh);
                        }
                        if need_k {
                            let qh = gather_head(self.value(q), bi, h, seq, d, dh);
                            let dkh = gemm_tn(&ds, &qh, seq, seq, dh);
                            scatter_head(&mut dk, &dkh, bi, h, seq, d, dh);
                        }
                    }
                }
                if need_q {
                    self.accumulate(q, dq);
                }
                if need_k {
                    self.accumulate(k, dk);
                }
                if need_v {
                    self.accumulate(v, dv);
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.requires_grad(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![T::zero(); self.value(table).len()];
                    for (r, &i) in ids.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(table, dt);
                }
            }
            Op::CrossEntropy { logits, ref targets, ref probs } => {
                if self.requires_grad(logits) {
                    let vocab = self.shape(logits)[1];
                    let coef = g[0] / T::from_usize(targets.len());
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vocab + t] -= coef;
                    }
                    self.accumulate(logits, dl);
                }
            }
        }
        let _ = id;
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

fn gather_head<T: Scalar>(src: &[T], b: usize, h: usize, seq: usize, d: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(seq * dh);
    for t in 0..seq {
        let row = (b * seq + t) * d + h * dh;
        out.extend_from_slice(&src[row..row + dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], b: usize, h: usize, seq: usize, d: usize, dh: usize) {
    for t in 0..seq {
        let row = (b * seq + t) * d + h * dh;
        dst[row..row + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, relative_error, STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

    /// Reduces the op output to a scalar through a fixed random projection
    /// and compares tape gradients of every input with central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: &Build, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eval = |xs: &[Tensor<f64>], tape: &mut Tape<f64>, proj: Option<&Tensor<f64>>| -> (Var, Vec<Var>, Tensor<f64>) {
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
            let out = build(tape, &vars).unwrap();
            let r = match proj {
                Some(p) => p.clone(),
                None => Tensor::zeros(tape.shape(out)),
            };
            let rv = tape.constant(r.shape(), r.data().to_vec()).unwrap();
            let prod = tape.mul(out, rv).unwrap();
            (tape.sum(prod), vars, r)
        };
        let mut probe = Tape::new();
        let (_, _, zeros) = eval(&inputs, &mut probe, None);
        let proj = randn(zeros.shape(), &mut rng);

        let grads_inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
        let mut tape = Tape::new();
        let (loss, vars, _) = eval(&grads_inputs, &mut tape, Some(&proj));
        tape.backward(loss).unwrap();

        for (i, input) in inputs.iter().enumerate() {
            let fd = central_differences(input.data(), STEP, |v| {
                let mut xs = inputs.clone();
                xs[i].data_mut().copy_from_slice(v);
                let mut t = Tape::new();
                let (l, _, _) = eval(&xs, &mut t, Some(&proj));
                t.value(l)[0]
            });
            let g = tape.grad(vars[i]).unwrap();
            let err = relative_error(g, &fd, 1e-6);
            assert!(err < 1e-4, "input {i}: relative error {err}");
        }
    }

    #[test]
    fn square_and_linear_map_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0f64).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::from_rows(&[&[0.3f64, -1.0], &[2.0, 0.5], &[1.0, 1.0]]).unwrap().with_requires_grad(true));
        let x = tape.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        let wx = tape.matmul(w, x).unwrap();
        let s = tape.sum(wx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 7.0, 8.0]);
        let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        assert!(matches!(tape.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let c = tape.constant(&[1], vec![1.0]).unwrap();
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::full(&[2, 2], 1.0));
        let x = tape.leaf(&Tensor::full(&[3, 2], 1.0).with_requires_grad(true));
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..3 {
            let a = randn(&[3, 4], &mut rng);
            let b = randn(&[3, 4], &mut rng);
            check(vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), seed);
            check(vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), seed);
            check(vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), seed);
            check(vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)), seed);
            check(vec![a.clone()], &|t, v| Ok(t.add_scalar(v[0], 0.3)), seed);
            check(vec![a.clone()], &|t, v| Ok(t.gelu(v[0])), seed);
            check(vec![a], &|t, v| Ok(t.sum(v[0])), seed);
        }
    }

    #[test]
    fn matrix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, k, m) in [(1, 1, 1), (3, 5, 2), (6, 4, 7)] {
            let a = randn(&[n, k], &mut rng);
            let b = randn(&[k, m], &mut rng);
            check(vec![a, b], &|t, v| t.matmul(v[0], v[1]), 3);
            let x = randn(&[n, k], &mut rng);
            let w = randn(&[m, k], &mut rng);
            let bias = randn(&[m], &mut rng);
            check(vec![x.clone(), w.clone(), bias], &|t, v| t.linear(v[0], v[1], Some(v[2])), 4);
            check(vec![x, w], &|t, v| t.linear(v[0], v[1], None), 5);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (rows, d) in [(1, 2), (4, 6)] {
            let x = randn(&[rows, d], &mut rng);
            let g = randn(&[d], &mut rng);
            let b = randn(&[d], &mut rng);
            check(vec![x, g, b], &|t, v| t.layer_norm(v[0], v[1], v[2]), 6);
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (batch, seq, heads, d) in [(1, 1, 1, 2), (2, 3, 2, 4), (1, 5, 1, 3)] {
            let q = randn(&[batch * seq, d], &mut rng);
            let k = randn(&[batch * seq, d], &mut rng);
            let v = randn(&[batch * seq, d], &mut rng);
            check(vec![q, k, v], &move |t, x| t.causal_attention(x[0], x[1], x[2], batch, seq, heads), 7);
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn(&[4, 2], &mut rng);
        let k = randn(&[4, 2], &mut rng);
        let v = randn(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let y = tape.causal_attention(qv, kv, vv, 1, 4, 1).unwrap();
        let before = tape.value(y).to_vec();
        assert_eq!(before[..2], v.data()[..2]);
        let mut v2 = v.clone();
        v2.data_mut()[6] += 10.0;
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v2));
        let y2 = tape.causal_attention(qv, kv, vv, 1, 4, 1).unwrap();
        assert_eq!(tape.value(y2)[..6], before[..6]);
        assert_ne!(tape.value(y2)[6..], before[6..]);
    }

    #[test]
    fn embedding_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = randn(&[5, 3], &mut rng);
        check(vec![table], &|t, v| t.embedding(v[0], &[4, 0, 4, 2]), 8);
        let logits = randn(&[4, 5], &mut rng);
        check(vec![logits], &|t, v| t.cross_entropy(v[0], &[1, 0, 4, 4]), 9);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(&[2, 8], vec![0.5; 16]).unwrap();
        let ce = tape.cross_entropy(l, &[3, 7]).unwrap();
        assert!((tape.value(ce)[0] - 8f64.ln()).abs() < 1e-15);
        assert!(matches!(tape.cross_entropy(l, &[3, 8]), Err(Error::Data(_))));
    }

    #[test]
    fn composite_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[4, 4], &mut rng);
        let g = randn(&[4], &mut rng);
        let b = randn(&[4], &mut rng);
        let w1 = randn(&[6, 4], &mut rng);
        let w2 = randn(&[3, 6], &mut rng);
        check(
            vec![x, g, b, w1, w2],
            &|t, v| {
                let h = t.layer_norm(v[0], v[1], v[2])?;
                let u = t.linear(h, v[3], None)?;
                let a = t.gelu(u);
                let y = t.linear(a, v[4], None)?;
                t.cross_entropy(y, &[0, 2, 1, 1])
            },
            10,
        );
    }
}
