//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Every op appends one node whose inputs were recorded earlier, so the
//! node order is a topological order and the backward pass is a single
//! reverse sweep. Leaf gradients are summed; a fresh tape starts at zero.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::attention::kernels as k;
use crate::error::{dim_err, Error, Result};
use crate::tensor::ops::{gemm, normalize_row, softmax_row_inplace, Activation, MatMut, MatRef};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    /// `a[i] += t[i mod len(t)]`
    AddTiled { a: Var, t: Var },
    Scale(Var, T),
    Act(Var, Activation),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    MeanRows { a: Var, groups: usize },
    Reshape(Var),
    DwConv { x: Var, ker: Var, batch: usize, grid: (usize, usize), k: usize },
    SoftmaxAttn { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<T> },
    WindowAttn { q: Var, k: Var, v: Var, batch: usize, heads: usize, grid: (usize, usize), w: usize, probs: Vec<T> },
    KernelAttn { pq: Var, pk: Var, v: Var, batch: usize, heads: usize, eps: T },
    Focus { a: Var, seg: usize, p: T },
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// An append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Whether any gradient flowed into `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn check_batch(rows: usize, batch: usize) -> Result<usize> {
    if batch == 0 || rows % batch != 0 {
        return Err(dim_err!("{rows} rows cannot be split into {batch} samples"));
    }
    Ok(rows / batch)
}

impl<T: Element> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// `op(a) · op(b)`, transposing either operand on request.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (out, m, n) = crate::tensor::ops::matmul_dense(av.data(), av.dims2()?, ta, bv.data(), bv.dims2()?, tb)?;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds `t` repeated along the flattened elements of `a` (bias rows,
    /// positional tables broadcast over a batch).
    pub fn add_tiled(&mut self, a: Var, t: Var) -> Result<Var> {
        let (av, tv) = (self.value(a), self.value(t));
        if tv.is_empty() || av.len() % tv.len() != 0 {
            return Err(dim_err!("cannot tile {:?} over {:?}", tv.shape(), av.shape()));
        }
        let td = tv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + td[i % td.len()]).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddTiled { a, t }, &[a, t]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a).map(|x| kind.apply(x));
        self.push(t, Op::Act(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(dim_err!("layer_norm width {d} vs gamma {} beta {}", g.len(), b.len()));
        }
        let xv = self.value(x);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d.max(1));
        for (row, o) in xv.data().chunks(d).zip(xhat.chunks_mut(d)) {
            rstd.push(normalize_row(row, eps, o));
        }
        let (gd, bd) = (g.data(), b.data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * gd[i % d] + bd[i % d]).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = crate::tensor::softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Mean over rows within each of `groups` equal row blocks:
    /// `[groups·n × d]` → `[groups × d]`.
    pub fn mean_rows(&mut self, a: Var, groups: usize) -> Result<Var> {
        let (rows, d) = self.value(a).dims2()?;
        let n = check_batch(rows, groups)?;
        let inv = T::one() / T::from_f64(n as f64);
        let mut out = vec![T::zero(); groups * d];
        for (r, row) in self.value(a).data().chunks(d).enumerate() {
            for (o, &x) in out[(r / n) * d..(r / n + 1) * d].iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let t = Tensor::new(vec![groups, d], out)?;
        Ok(self.push(t, Op::MeanRows { a, groups }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Depthwise convolution of each sample's token grid with that
    /// sample's kernel row. `x`: `[batch·hp·wp × c]`, `ker`: `[batch × c·k²]`.
    pub fn dwconv(&mut self, x: Var, ker: Var, batch: usize, grid: (usize, usize), k: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        let n = check_batch(rows, batch)?;
        if n != grid.0 * grid.1 {
            return Err(dim_err!("grid {:?} does not cover {n} tokens", grid));
        }
        if self.value(ker).len() != batch * c * k * k {
            return Err(dim_err!(
                "kernel tensor {:?} is not {batch}×{}",
                self.value(ker).shape(),
                c * k * k
            ));
        }
        let mut out = vec![T::zero(); rows * c];
        let (xd, kd) = (self.value(x).data(), self.value(ker).data());
        for b in 0..batch {
            k::dwconv_fwd(
                &xd[b * n * c..(b + 1) * n * c],
                &kd[b * c * k * k..(b + 1) * c * k * k],
                grid,
                c,
                k,
                &mut out[b * n * c..(b + 1) * n * c],
            );
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::DwConv { x, ker, batch, grid, k }, &[x, ker]))
    }

    fn attn_dims(&self, q: Var, kv: Var, v: Var, batch: usize, heads: usize) -> Result<(usize, usize)> {
        let (rows, dm) = self.value(q).dims2()?;
        if self.value(kv).shape() != [rows, dm] || self.value(v).shape() != [rows, dm] {
            return Err(dim_err!("attention inputs must share shape [{rows}×{dm}]"));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Config(format!("d_model {dm} not divisible by {heads} heads")));
        }
        Ok((check_batch(rows, batch)?, dm))
    }

    /// Multi-head softmax attention over each sample's tokens.
    pub fn softmax_attention(&mut self, q: Var, kv: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (n, dm) = self.attn_dims(q, kv, v, batch, heads)?;
        let mut out = vec![T::zero(); batch * n * dm];
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let (qd, kd, vd) = (self.value(q).data(), self.value(kv).data(), self.value(v).data());
        for b in 0..batch {
            let r = b * n * dm..(b + 1) * n * dm;
            k::softmax_attention_fwd(
                &qd[r.clone()],
                &kd[r.clone()],
                &vd[r.clone()],
                n,
                dm,
                heads,
                &mut out[r],
                Some(&mut probs[b * heads * n * n..(b + 1) * heads * n * n]),
            );
        }
        let t = Tensor::new(vec![batch * n, dm], out)?;
        Ok(self.push(t, Op::SoftmaxAttn { q, k: kv, v, batch, heads, probs }, &[q, kv, v]))
    }

    /// Softmax attention inside non-overlapping `w×w` windows.
    #[allow(clippy::too_many_arguments)]
    pub fn window_attention(
        &mut self,
        q: Var,
        kv: Var,
        v: Var,
        batch: usize,
        heads: usize,
        grid: (usize, usize),
        w: usize,
    ) -> Result<Var> {
        let (n, dm) = self.attn_dims(q, kv, v, batch, heads)?;
        if grid.0 * grid.1 != n {
            return Err(dim_err!("grid {:?} does not cover {n} tokens", grid));
        }
        if w == 0 || grid.0 % w != 0 || grid.1 % w != 0 {
            return Err(Error::Config(format!("window {w} does not tile grid {:?}", grid)));
        }
        let per_sample = heads * n * w * w;
        let mut out = vec![T::zero(); batch * n * dm];
        let mut probs = vec![T::zero(); batch * per_sample];
        let (qd, kd, vd) = (self.value(q).data(), self.value(kv).data(), self.value(v).data());
        for b in 0..batch {
            let r = b * n * dm..(b + 1) * n * dm;
            k::window_attention_fwd(
                &qd[r.clone()],
                &kd[r.clone()],
                &vd[r.clone()],
                grid,
                w,
                dm,
                heads,
                &mut out[r],
                Some(&mut probs[b * per_sample..(b + 1) * per_sample]),
            );
        }
        let t = Tensor::new(vec![batch * n, dm], out)?;
        Ok(self.push(t, Op::WindowAttn { q, k: kv, v, batch, heads, grid, w, probs }, &[q, kv, v]))
    }

    /// Normalized kernelized attention on already feature-mapped `pq`, `pk`.
    pub fn kernelized_attention(&mut self, pq: Var, pk: Var, v: Var, batch: usize, heads: usize, eps: T) -> Result<Var> {
        let (n, dm) = self.attn_dims(pq, pk, v, batch, heads)?;
        let mut out = vec![T::zero(); batch * n * dm];
        let (qd, kd, vd) = (self.value(pq).data(), self.value(pk).data(), self.value(v).data());
        for b in 0..batch {
            let r = b * n * dm..(b + 1) * n * dm;
            k::kernelized_attention_fwd(&qd[r.clone()], &kd[r.clone()], &vd[r.clone()], n, dm, heads, eps, &mut out[r]);
        }
        let t = Tensor::new(vec![batch * n, dm], out)?;
        Ok(self.push(t, Op::KernelAttn { pq, pk, v, batch, heads, eps }, &[pq, pk, v]))
    }

    /// Focusing transform applied to each `seg`-wide segment of every row.
    pub fn focus(&mut self, a: Var, seg: usize, p: T) -> Result<Var> {
        let av = self.value(a);
        if seg == 0 || av.len() % seg != 0 {
            return Err(dim_err!("segment width {seg} does not divide {:?}", av.shape()));
        }
        let mut out = vec![T::zero(); av.len()];
        k::focus_fwd(av.data(), seg, p, &mut out);
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Focus { a, seg, p }, &[a]))
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err!("mse shapes {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let n = T::from_f64(av.len() as f64);
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(dim_err!("{} labels for {m} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            softmax_row_inplace(row);
            loss = loss - row[y].max(T::min_positive_value()).ln();
        }
        let loss = loss / T::from_f64(m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads: leaves,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(*a).dims2()?;
                let (br, bc) = self.value(*b).dims2()?;
                let (m, n) = node.value.dims2()?;
                let mut opa = MatRef::dense(val(*a), ar, ac);
                if *ta {
                    opa = opa.t();
                }
                let mut opb = MatRef::dense(val(*b), br, bc);
                if *tb {
                    opb = opb.t();
                }
                let dc = MatRef::dense(g, m, n);
                if self.wants(*a) {
                    let da = acc(grads, *a, ar * ac);
                    if *ta {
                        gemm(T::one(), opb, dc.t(), T::one(), MatMut::dense(da, ar, ac));
                    } else {
                        gemm(T::one(), dc, opb.t(), T::one(), MatMut::dense(da, ar, ac));
                    }
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, br * bc);
                    if *tb {
                        gemm(T::one(), dc.t(), opa, T::one(), MatMut::dense(db, br, bc));
                    } else {
                        gemm(T::one(), opa.t(), dc, T::one(), MatMut::dense(db, br, bc));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddTiled { a, t } => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*t) {
                    let len = self.value(*t).len();
                    let dt = acc(grads, *t, len);
                    for (i, &gv) in g.iter().enumerate() {
                        dt[i % len] = dt[i % len] + gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    for (d, &gv) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *d = *d + gv * *c;
                    }
                }
            }
            Op::Act(a, kind) => {
                if self.wants(*a) {
                    let x = val(*a);
                    for ((d, &gv), &xv) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                        *d = *d + gv * kind.derivative(xv);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gd = val(*gamma);
                if self.wants(*gamma) {
                    let dg = acc(grads, *gamma, d);
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] = dg[i % d] + gv * xh;
                    }
                }
                if self.wants(*beta) {
                    let db = acc(grads, *beta, d);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + gv;
                    }
                }
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((grow, xrow), drow)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        for ((o, &gv), &gm) in dxhat.iter_mut().zip(grow).zip(gd) {
                            *o = gv * gm;
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for ((o, &dh), &xh) in drow.iter_mut().zip(&dxhat).zip(xrow) {
                            *o = *o + rstd[r] * (dh - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let (_, c) = node.value.dims2()?;
                    let y = node.value.data();
                    let da = acc(grads, *a, g.len());
                    for ((grow, yrow), drow) in g.chunks(c).zip(y.chunks(c)).zip(da.chunks_mut(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::MeanRows { a, groups } => {
                if self.wants(*a) {
                    let (rows, d) = self.value(*a).dims2()?;
                    let n = rows / groups;
                    let inv = T::one() / T::from_f64(n as f64);
                    let da = acc(grads, *a, rows * d);
                    for (r, drow) in da.chunks_mut(d).enumerate() {
                        for (o, &gv) in drow.iter_mut().zip(&g[(r / n) * d..(r / n + 1) * d]) {
                            *o = *o + gv * inv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
            Op::DwConv { x, ker, batch, grid, k: ks } => {
                let (rows, c) = self.value(*x).dims2()?;
                let n = rows / batch;
                let kl = c * ks * ks;
                let (xd, kd) = (val(*x), val(*ker));
                let mut dx = self.wants(*x).then(|| vec![T::zero(); rows * c]);
                let mut dk = self.wants(*ker).then(|| vec![T::zero(); batch * kl]);
                for b in 0..*batch {
                    k::dwconv_bwd(
                        &xd[b * n * c..(b + 1) * n * c],
                        &kd[b * kl..(b + 1) * kl],
                        &g[b * n * c..(b + 1) * n * c],
                        *grid,
                        c,
                        *ks,
                        dx.as_deref_mut().map(|d| &mut d[b * n * c..(b + 1) * n * c]),
                        dk.as_deref_mut().map(|d| &mut d[b * kl..(b + 1) * kl]),
                    );
                }
                if let Some(dx) = dx {
                    add_into(acc(grads, *x, dx.len()), &dx);
                }
                if let Some(dk) = dk {
                    add_into(acc(grads, *ker, dk.len()), &dk);
                }
            }
            Op::SoftmaxAttn { q, k: kv, v, batch, heads, probs } => {
                let (rows, dm) = node.value.dims2()?;
                let n = rows / batch;
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); rows * dm], vec![T::zero(); rows * dm], vec![T::zero(); rows * dm]);
                for b in 0..*batch {
                    let r = b * n * dm..(b + 1) * n * dm;
                    k::softmax_attention_bwd(
                        &val(*q)[r.clone()],
                        &val(*kv)[r.clone()],
                        &val(*v)[r.clone()],
                        &probs[b * heads * n * n..(b + 1) * heads * n * n],
                        &g[r.clone()],
                        n,
                        dm,
                        *heads,
                        &mut dq[r.clone()],
                        &mut dk[r.clone()],
                        &mut dv[r],
                    );
                }
                self.accumulate3(grads, [*q, *kv, *v], [dq, dk, dv]);
            }
            Op::WindowAttn { q, k: kv, v, batch, heads, grid, w, probs } => {
                let (rows, dm) = node.value.dims2()?;
                let n = rows / batch;
                let per_sample = heads * n * w * w;
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); rows * dm], vec![T::zero(); rows * dm], vec![T::zero(); rows * dm]);
                for b in 0..*batch {
                    let r = b * n * dm..(b + 1) * n * dm;
                    k::window_attention_bwd(
                        &val(*q)[r.clone()],
                        &val(*kv)[r.clone()],
                        &val(*v)[r.clone()],
                        &probs[b * per_sample..(b + 1) * per_sample],
                        &g[r.clone()],
                        *grid,
                        *w,
                        dm,
                        *heads,
                        &mut dq[r.clone()],
                        &mut dk[r.clone()],
                        &mut dv[r],
                    );
                }
                self.accumulate3(grads, [*q, *kv, *v], [dq, dk, dv]);
            }
            Op::KernelAttn { pq, pk, v, batch, heads, eps } => {
                let (rows, dm) = node.value.dims2()?;
                let n = rows / batch;
                let out = node.value.data();
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); rows * dm], vec![T::zero(); rows * dm], vec![T::zero(); rows * dm]);
                for b in 0..*batch {
                    let r = b * n * dm..(b + 1) * n * dm;
                    k::kernelized_attention_bwd(
                        &val(*pq)[r.clone()],
                        &val(*pk)[r.clone()],
                        &val(*v)[r.clone()],
                        &out[r.clone()],
                        &g[r.clone()],
                        n,
                        dm,
                        *heads,
                        *eps,
                        &mut dq[r.clone()],
                        &mut dk[r.clone()],
                        &mut dv[r],
                    );
                }
                self.accumulate3(grads, [*pq, *pk, *v], [dq, dk, dv]);
            }
            Op::Focus { a, seg, p } => {
                if self.wants(*a) {
                    let da = acc(grads, *a, g.len());
                    k::focus_bwd(val(*a), *seg, *p, g, da);
                }
            }
            Op::Mse(a, b) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                let two = T::from_f64(2.0) * g[0] / n;
                let (ad, bd) = (val(*a), val(*b));
                if self.wants(*a) {
                    for ((d, &x), &y) in acc(grads, *a, ad.len()).iter_mut().zip(ad).zip(bd) {
                        *d = *d + two * (x - y);
                    }
                }
                if self.wants(*b) {
                    for ((d, &x), &y) in acc(grads, *b, bd.len()).iter_mut().zip(ad).zip(bd) {
                        *d = *d - two * (x - y);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / T::from_f64(labels.len() as f64);
                    let dl = acc(grads, *logits, probs.len());
                    for (r, (&y, prow)) in labels.iter().zip(probs.chunks(c)).enumerate() {
                        for (j, &p) in prow.iter().enumerate() {
                            let t = if j == y { p - T::one() } else { p };
                            dl[r * c + j] = dl[r * c + j] + scale * t;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let da = acc(grads, *a, self.value(*a).len());
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
        Ok(())
    }

    fn accumulate3(&self, grads: &mut [Option<Vec<T>>], vars: [Var; 3], parts: [Vec<T>; 3]) {
        for (v, d) in vars.into_iter().zip(parts) {
            if self.wants(v) {
                add_into(acc(grads, v, d.len()), &d);
            }
        }
    }
}

fn acc<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
