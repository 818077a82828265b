//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse scan of the node list is a valid
//! topological order for the backward pass.

use std::collections::HashMap;

use crate::tensor::matmul_into;
use crate::{Error, Float, ParamId, ParamStore, Result, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a batched multi-head attention call over `[batch * seq, d]` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid length of each sequence; keys at or beyond it are masked.
    pub lens: Vec<usize>,
}

impl AttentionLayout {
    pub fn key_visible(&self, b: usize, query: usize, key: usize) -> bool {
        key < self.lens[b] && (!self.causal || key <= query)
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<F> {
    Constant,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Sqrt(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<F> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    GroupSumSquares { x: Var, rows_per_group: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    StopGradient,
    StraightThrough(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Trainable leaf. Requesting the same parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] @ b[n,k]^T`, used for tied output heads.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, kb) = if trans_b { (bv.rows(), bv.cols()) } else { (bv.cols(), bv.rows()) };
        assert_eq!(k, kb, "matmul inner dimensions {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![F::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n, false, trans_b, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::MatMul { a, b, trans_b }, ng)
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(xv.cols(), bv.len());
        let mut out = xv.clone();
        let c = bv.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias { x, bias }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise operands differ in shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.sqrt();
        }
        let ng = self.ng(x);
        self.push(out, Op::Sqrt(x), ng)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        let eps = F::lit(LN_EPS);
        let cf = F::from_count(c);
        let mut out = vec![F::zero(); rows * c];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng)
    }

    /// Scaled dot-product attention for all heads and sequences at once.
    /// `q`, `k`, `v` are `[batch * seq, d]` with `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttentionLayout { batch, seq, heads, .. } = layout;
        assert_eq!(qv.rows(), batch * seq);
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert_eq!(layout.lens.len(), batch);
        assert!(d % heads == 0);
        let dh = d / heads;
        let scale = F::one() / F::from_count(dh).sqrt();
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: strided views stay inside the [batch*seq, d] buffers.
                unsafe {
                    F::gemm(
                        seq,
                        dh,
                        seq,
                        scale,
                        qv.data().as_ptr().add(off),
                        d as isize,
                        1,
                        kv.data().as_ptr().add(off),
                        1,
                        d as isize,
                        F::zero(),
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = F::neg_infinity();
                    for (j, s) in row.iter().enumerate() {
                        if layout.key_visible(b, i, j) && *s > max {
                            max = *s;
                        }
                    }
                    let mut total = F::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.key_visible(b, i, j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = F::zero();
                        }
                    }
                    if total > F::zero() {
                        for s in row.iter_mut() {
                            *s /= total;
                        }
                    }
                }
                unsafe {
                    F::gemm(
                        seq,
                        seq,
                        dh,
                        F::one(),
                        p.as_ptr(),
                        seq as isize,
                        1,
                        vv.data().as_ptr().add(off),
                        d as isize,
                        1,
                        F::zero(),
                        out.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out).unwrap();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, layout, probs }, ng)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < tv.rows(), "gather index {id} out of range {}", tv.rows());
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], out).unwrap();
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c);
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![rows, c], data).unwrap(), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// Sum of squares over consecutive blocks of `rows_per_group` rows.
    pub fn group_sum_squares(&mut self, x: Var, rows_per_group: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows() % rows_per_group, 0);
        let width = rows_per_group * xv.cols();
        let out: Vec<F> = xv.data().chunks(width).map(|c| c.iter().map(|&v| v * v).sum()).collect();
        let n = out.len();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n], out).unwrap(), Op::GroupSumSquares { x, rows_per_group }, ng)
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    /// Rows with zero weight contribute nothing and receive exactly zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = vec![F::zero(); rows * c];
        let mut total = F::zero();
        for r in 0..rows {
            if weights[r] == F::zero() {
                continue;
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total += weights[r] * (lse - row[targets[r]]);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            ng,
        )
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Forward value `replacement`, backward passes the incoming gradient to
    /// `x` unchanged. This is the quantizer's straight-through estimator.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<F>) -> Var {
        assert_eq!(self.value(x).shape(), replacement.shape());
        let ng = self.ng(x);
        self.push(replacement, Op::StraightThrough(x), ng)
    }

    /// Reverse-mode pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarLoss(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), F::one()));
        for i in (0..=root.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, g, lo);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v.0, self.value(v).shape().to_vec())).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Tensor<F>>], v: Var) -> Option<&'a mut Tensor<F>> {
        if !self.ng(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(lo[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, lo: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Constant | Op::Param | Op::StopGradient => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if let Some(ga) = self.slot(lo, *a) {
                    // dA = dC @ B^T   (B stored [k,n]) or dC @ B (B stored [n,k])
                    matmul_into(g.data(), bv.data(), ga.data_mut(), m, n, k, false, !*trans_b, true);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    if *trans_b {
                        // dB[n,k] = dC^T @ A
                        matmul_into(g.data(), av.data(), gb.data_mut(), n, m, k, true, false, true);
                    } else {
                        // dB[k,n] = A^T @ dC
                        matmul_into(av.data(), g.data(), gb.data_mut(), k, m, n, true, false, true);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.slot(lo, *bias) {
                    let c = gb.len();
                    for (i, &v) in g.data().iter().enumerate() {
                        gb.data_mut()[i % c] += v;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(lo, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(lo, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for (d, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lo, *a) {
                    for ((d, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for ((d, &gv), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(lo, *x) {
                    for (d, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += v * *s;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lo, *x) {
                    for ((d, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                }
            }
            Op::Sqrt(x) => {
                let yv = node.value.data();
                if let Some(gx) = self.slot(lo, *x) {
                    let two = F::lit(2.0);
                    for ((d, &gv), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(yv) {
                        // subgradient 0 at the kink
                        if y > F::zero() {
                            *d += gv / (two * y);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let (rows, c) = (xv.rows(), xv.cols());
                let cf = F::from_count(c);
                if let Some(gg) = self.slot(lo, *gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            let xhat = (xv.row(r)[j] - mean[r]) * rstd[r];
                            gg.data_mut()[j] += g.row(r)[j] * xhat;
                        }
                    }
                }
                if let Some(gb) = self.slot(lo, *beta) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb.data_mut()[j] += g.row(r)[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(lo, *x) {
                    let mut dxhat = vec![F::zero(); c];
                    for r in 0..rows {
                        let (row, gr) = (xv.row(r), g.row(r));
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat;
                        }
                        let (m1, m2) = (s1 / cf, s2 / cf);
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            out[j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(g, *q, *k, *v, layout, probs, lo);
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(lo, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = g.row(i);
                        for (d, &s) in gt.row_mut(id).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(lo, p) {
                        for (d, &s) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *d += s;
                        }
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let gs = g.item();
                if let Some(gx) = self.slot(lo, *x) {
                    for d in gx.data_mut() {
                        *d += gs;
                    }
                }
            }
            Op::SumSquares(x) => {
                let gs = g.item() * F::lit(2.0);
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lo, *x) {
                    for (d, &v) in gx.data_mut().iter_mut().zip(xv) {
                        *d += gs * v;
                    }
                }
            }
            Op::GroupSumSquares { x, rows_per_group } => {
                let xv = self.value(*x);
                let width = rows_per_group * xv.cols();
                let two = F::lit(2.0);
                if let Some(gx) = self.slot(lo, *x) {
                    for (i, (d, &v)) in gx.data_mut().iter_mut().zip(xv.data()).enumerate() {
                        *d += two * g.data()[i / width] * v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let gs = g.item();
                let c = self.value(*logits).cols();
                if let Some(gl) = self.slot(lo, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let row = gl.row_mut(r);
                        for j in 0..c {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            row[j] += gs * w * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::StraightThrough(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    gx.add_assign(g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<F>,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[F],
        lo: &mut [Option<Tensor<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttentionLayout { batch, seq, heads, .. } = *layout;
        let dh = d / heads;
        let scale = F::one() / F::from_count(dh).sqrt();
        let mut gq = vec![F::zero(); qv.len()];
        let mut gk = vec![F::zero(); qv.len()];
        let mut gv = vec![F::zero(); qv.len()];
        let mut dp = vec![F::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: all views are in-bounds strided sub-matrices of [batch*seq, d] buffers.
                unsafe {
                    // dV = P^T dO
                    F::gemm(
                        seq,
                        seq,
                        dh,
                        F::one(),
                        p.as_ptr(),
                        1,
                        seq as isize,
                        g.data().as_ptr().add(off),
                        d as isize,
                        1,
                        F::zero(),
                        gv.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                    // dP = dO V^T
                    F::gemm(
                        seq,
                        dh,
                        seq,
                        F::one(),
                        g.data().as_ptr().add(off),
                        d as isize,
                        1,
                        vv.data().as_ptr().add(off),
                        1,
                        d as isize,
                        F::zero(),
                        dp.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for i in 0..seq {
                    let (prow, drow) = (&p[i * seq..(i + 1) * seq], &mut dp[i * seq..(i + 1) * seq]);
                    let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                unsafe {
                    // dQ = dS K
                    F::gemm(
                        seq,
                        seq,
                        dh,
                        F::one(),
                        dp.as_ptr(),
                        seq as isize,
                        1,
                        kv.data().as_ptr().add(off),
                        d as isize,
                        1,
                        F::zero(),
                        gq.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                    // dK = dS^T Q
                    F::gemm(
                        seq,
                        seq,
                        dh,
                        F::one(),
                        dp.as_ptr(),
                        1,
                        seq as isize,
                        qv.data().as_ptr().add(off),
                        d as isize,
                        1,
                        F::zero(),
                        gk.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(lo, var) {
                for (d, s) in slot.data_mut().iter_mut().zip(buf) {
                    *d += s;
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients for every reached node.
pub struct Gradients<F> {
    nodes: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, usize, Vec<usize>)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient w.r.t. an arbitrary tape node, `None` if it was not reached.
    pub fn var(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.iter().find(|(p, _, _)| *p == id).and_then(|(_, n, _)| self.nodes[*n].as_ref())
    }

    /// Gradients keyed by parameter, ordered by parameter id. Parameters on
    /// the tape that the root does not depend on get zeros.
    pub fn into_params(mut self) -> Vec<(ParamId, Tensor<F>)> {
        let mut params = std::mem::take(&mut self.params);
        params.sort_by_key(|(p, _, _)| *p);
        params
            .into_iter()
            .map(|(p, n, shape)| {
                let g = self.nodes[n].take();
                (p, g.unwrap_or_else(|| Tensor::zeros(&shape)))
            })
            .collect()
    }
}

fn gelu<F: Float>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}
