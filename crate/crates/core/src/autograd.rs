//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application as a node in creation
//! order, so the node list is always a valid topological order. Calling
//! [`Graph::backward`] walks it in reverse and accumulates vector-Jacobian
//! products into every input that requires a gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What to do when a primitive produces NaN or Inf.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FinitePolicy {
    #[default]
    Error,
    Warn,
}

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool, batched: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: F },
    Gelu { a: Var, tanh: Vec<F> },
    Linear { x: Var, w: Var, b: Var },
    Attention { qkv: Var, batch: usize, heads: usize, scale: F, probs: Vec<F> },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, rows: Vec<usize>, probs: Vec<F> },
    Reshape { a: Var },
    SliceLast { a: Var, start: usize },
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Dropout { a: Var, mask: Vec<F> },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    policy: FinitePolicy,
    warned: bool,
    loss_rows: usize,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// Row-major matrix view with explicit strides, fed to `Scalar::gemm`.
#[derive(Clone, Copy)]
struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, F: Scalar> View<'a, F> {
    fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn maybe_t(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

// out (row-major, a.rows x b.cols) = a * b + beta * out
fn gemm<F: Scalar>(a: View<F>, b: View<F>, beta: F, out: &mut [F]) {
    debug_assert_eq!(a.cols, b.rows);
    F::gemm(a.rows, a.cols, b.cols, F::one(), (a.data, a.rs, a.cs), (b.data, b.rs, b.cs), beta, (out, b.cols as isize, 1));
}

// tanh through a single exp; saturates correctly at both ends
fn tanh<F: Scalar>(u: F) -> F {
    let two = F::from_f64(2.0);
    F::one() - two / ((two * u).exp_fast() + F::one())
}

// (gelu(x), tanh term)
pub(crate) fn gelu<F: Scalar>(x: F) -> (F, F) {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let t = tanh(c * (x + a * x * x * x));
    (half * x * (F::one() + t), t)
}

fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn attention_backward<F: Scalar>(qd: &[F], gout: &[F], probs: &[F], gq: &mut [F], batch: usize, heads: usize, scale: F) {
    let t = (probs.len() / (batch * heads)).isqrt();
    let d = gout.len() / (batch * t);
    let hd = d / heads;
    let ld = 3 * d as isize;
    let mut dp = vec![F::zero(); t * t];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * t * 3 * d + h * hd;
            let p = &probs[(b * heads + h) * t * t..][..t * t];
            let dy = &gout[b * t * d + h * hd..];
            // dV += P^T dY
            F::gemm(t, t, hd, F::one(), (p, 1, t as isize), (dy, d as isize, 1), F::one(), (&mut gq[base + 2 * d..], ld, 1));
            // dP = dY V^T
            F::gemm(t, hd, t, F::one(), (dy, d as isize, 1), (&qd[base + 2 * d..], 1, ld), F::zero(), (&mut dp, t as isize, 1));
            // dS = P * (dP - rowsum(P * dP)) * scale; masked entries have P = 0
            for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot = dr.iter().zip(pr).map(|(&g, &q)| g * q).sum::<F>();
                for (g, &q) in dr.iter_mut().zip(pr) {
                    *g = q * (*g - dot) * scale;
                }
            }
            // dQ += dS K, dK += dS^T Q
            F::gemm(t, t, hd, F::one(), (&dp, t as isize, 1), (&qd[base + d..], ld, 1), F::one(), (&mut gq[base..], ld, 1));
            F::gemm(t, t, hd, F::one(), (&dp, 1, t as isize), (&qd[base..], ld, 1), F::one(), (&mut gq[base + d..], ld, 1));
        }
    }
}

/// Numerically stable softmax of one row in place. Entries at index >= `len`
/// are set to zero.
pub(crate) fn softmax_row<F: Scalar>(row: &mut [F], len: usize) {
    let max = row[..len].iter().fold(F::neg_infinity(), |m, &x| if x > m { x } else { m });
    let mut sum = F::zero();
    for x in row[..len].iter_mut() {
        *x = (*x - max).exp_fast();
        sum = sum + *x;
    }
    let inv = F::one() / sum;
    for x in row[..len].iter_mut() {
        *x = *x * inv;
    }
    for x in row[len..].iter_mut() {
        *x = F::zero();
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), policy: FinitePolicy::Error, warned: false, loss_rows: 0 }
    }

    pub fn with_policy(policy: FinitePolicy) -> Self {
        Graph { policy, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rows for which a loss term has been evaluated so far.
    pub fn loss_rows_evaluated(&self) -> usize {
        self.loss_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            match self.policy {
                FinitePolicy::Error => return Err(Error::NonFinite(name.to_string())),
                FinitePolicy::Warn => {
                    if !self.warned {
                        log::warn!("non-finite value produced by {name}; continuing");
                        self.warned = true;
                    }
                }
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [.., k] x b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [.., k] x b[n, k]^T -> [.., n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Affine map `x [.., k] x w [k, n] + b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] || self.shape(b) != [sw[1]] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k.max(1);
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(bd);
        }
        gemm(View::new(self.value(x).data(), rows, k), View::new(self.value(w).data(), k, n), F::one(), &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("linear", value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Multi-head self-attention on packed projections.
    ///
    /// `qkv` is `[batch * T, 3 * d]` holding queries, keys and values side
    /// by side; the result is `[batch * T, d]` with heads concatenated.
    /// Equivalent to splitting heads, `causal_softmax(q k^T / sqrt(hd)) v`
    /// (plain softmax when `causal` is false) and merging heads again,
    /// without the intermediate copies.
    pub fn self_attention(&mut self, qkv: Var, batch: usize, heads: usize, causal: bool) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || batch == 0 || !s[0].is_multiple_of(batch) || heads == 0 || !s[1].is_multiple_of(3 * heads) {
            return Err(Error::shape("self_attention", &s, &[batch, heads]));
        }
        let t = s[0] / batch;
        let d = s[1] / 3;
        let hd = d / heads;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let qd = self.value(qkv).data();
        let mut out = vec![F::zero(); batch * t * d];
        let mut probs = vec![F::zero(); batch * heads * t * t];
        let ld = 3 * d as isize;
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * 3 * d + h * hd;
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                // scores = q k^T
                F::gemm(t, hd, t, scale, (&qd[base..], ld, 1), (&qd[base + d..], 1, ld), F::zero(), (p, t as isize, 1));
                for (r, row) in p.chunks_mut(t).enumerate() {
                    softmax_row(row, if causal { r + 1 } else { t });
                }
                let o = &mut out[b * t * d + h * hd..];
                F::gemm(t, t, hd, F::one(), (p, t as isize, 1), (&qd[base + 2 * d..], ld, 1), F::zero(), (o, d as isize, 1));
            }
        }
        let value = Tensor::new(vec![batch * t, d], out)?;
        self.push("self_attention", value, Op::Attention { qkv, batch, heads, scale, probs }, &[qkv])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let rows = self.value(a).numel() / k.max(1);
        let mut out = vec![F::zero(); rows * n];
        {
            let av = View::new(self.value(a).data(), rows, k);
            let bv = View::new(self.value(b).data(), sb[0], sb[1]).maybe_t(tb);
            gemm(av, bv, F::zero(), &mut out);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, tb, batched: false }, &[a, b])
    }

    /// Batched product `a [B, m, k] x b [B, k, n] -> [B, m, n]`; with
    /// `transpose_b`, `b` is `[B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != bk {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let av = View::new(&ad[i * m * k..(i + 1) * m * k], m, k);
                let bv = View::new(&bd[i * k * n..(i + 1) * k * n], sb[1], sb[2]).maybe_t(transpose_b);
                gemm(av, bv, F::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push("bmm", value, Op::MatMul { a, b, tb: transpose_b, batched: true }, &[a, b])
    }

    /// Elementwise sum. `b` may also match only the trailing dimensions of
    /// `a`, in which case it is broadcast over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(nb) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o = *o + x;
            }
        }
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * x;
        }
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = *o * s;
        }
        self.push("scale", out, Op::Scale { a, s }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut tanh = vec![F::zero(); out.numel()];
        for (o, t) in out.data_mut().iter_mut().zip(tanh.iter_mut()) {
            (*o, *t) = gelu(*o);
        }
        self.push("gelu", out, Op::Gelu { a, tanh }, &[a])
    }

    pub fn softmax_last_dim(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let d = out.last_dim();
        if d == 0 {
            return Err(Error::invalid("softmax_last_dim", "empty last dimension"));
        }
        for row in out.data_mut().chunks_mut(d) {
            softmax_row(row, d);
        }
        self.push("softmax_last_dim", out, Op::Softmax { a }, &[a])
    }

    /// Softmax over the last dimension of `[.., T, T]` scores where entry
    /// `(i, j)` with `j > i` is excluded (probability exactly zero).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(Error::shape("causal_softmax", &shape, &[]));
        }
        let t = shape[shape.len() - 1];
        let mut out = self.value(a).clone();
        for (r, row) in out.data_mut().chunks_mut(t).enumerate() {
            softmax_row(row, r % t + 1);
        }
        self.push("causal_softmax", out, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last dimension followed by the affine
    /// map `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = F::one() / F::from_f64(d as f64);
        let eps = F::from_f64(LN_EPS);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, &[x, gamma, beta])
    }

    /// Gathers rows of `table [V, d]`, giving `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding_lookup", &shape, &[]));
        }
        let (v, d) = (shape[0], shape[1]);
        let mut idx = Vec::with_capacity(ids.len());
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { position, id, vocab_size: v });
            }
            idx.push(id as usize);
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding_lookup", value, Op::Embedding { table, ids: idx }, &[table])
    }

    /// Mean negative log-likelihood of `targets` under `logits [N, V]`,
    /// restricted to rows where `mask` is true. Unmasked rows are never read.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(Error::shape("cross_entropy_masked", &shape, &[targets.len(), mask.len()]));
        }
        let v = shape[1];
        let rows: Vec<usize> = (0..shape[0]).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyLossMask);
        }
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut tgt = Vec::with_capacity(rows.len());
        let mut total = F::zero();
        for &r in &rows {
            let t = targets[r] as usize;
            if t >= v {
                return Err(Error::TokenOutOfRange { position: r, id: targets[r], vocab_size: v });
            }
            let start = probs.len();
            probs.extend_from_slice(&ld[r * v..(r + 1) * v]);
            let row = &mut probs[start..];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| if x > m { x } else { m });
            let lse = row.iter().map(|&x| (x - max).exp_fast()).sum::<F>().ln() + max;
            total = total + (lse - row[t]);
            softmax_row(row, v);
            tgt.push(t);
        }
        self.loss_rows += rows.len();
        let loss = total / F::from_f64(rows.len() as f64);
        self.push("cross_entropy_masked", Tensor::scalar(loss), Op::CrossEntropy { logits, targets: tgt, rows, probs }, &[logits])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::invalid("slice_last", format!("{start}+{len} exceeds {d}")));
        }
        let mut out = Vec::with_capacity(self.value(a).rows() * len);
        for row in self.value(a).data().chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut s = shape;
        *s.last_mut().unwrap() = len;
        let value = Tensor::new(s, out)?;
        self.push("slice_last", value, Op::SliceLast { a, start }, &[a])
    }

    /// `[B, T, H*hd] -> [B*H, T, hd]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let hd = d / heads;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let from = (bi * t + ti) * d + h * hd;
                    let to = ((bi * heads + h) * t + ti) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let value = Tensor::new(vec![b * heads, t, hd], out)?;
        self.push("split_heads", value, Op::SplitHeads { a, heads }, &[a])
    }

    /// `[B*H, T, hd] -> [B, T, H*hd]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (bh, t, hd) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = heads * hd;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let to = (bi * t + ti) * d + h * hd;
                    let from = ((bi * heads + h) * t + ti) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out)?;
        self.push("merge_heads", value, Op::MergeHeads { a, heads }, &[a])
    }

    /// Inverted dropout. Returns `a` unchanged when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(a).numel()).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect();
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        self.push("dropout", out, Op::Dropout { a, mask }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, gout, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                (None, Op::Leaf) if n.requires_grad => Some(Tensor::zeros(n.value.shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<F>, gout_owned: Vec<F>, grads: &mut [Option<Vec<F>>]) {
        // adds `g` into the gradient slot of `v`, reusing the buffer when the
        // slot is still empty
        fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a = *a + x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        let gout = &gout_owned[..];
        fn buf<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, n: usize) -> &mut Vec<F> {
            grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb, batched } => {
                let (a, b, tb) = (*a, *b, *tb);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (batch, m, k, sb_rows, sb_cols) = if *batched {
                    (sa[0], sa[1], sa[2], sb[1], sb[2])
                } else {
                    let k = *sa.last().unwrap();
                    (1, self.value(a).numel() / k.max(1), k, sb[0], sb[1])
                };
                let n = if tb { sb_rows } else { sb_cols };
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let (a_step, b_step, c_step) = (m * k, k * n, m * n);
                let b_stride = if *batched { b_step } else { 0 };
                if self.wants(a) {
                    let ga = buf(grads, a, ad.len());
                    for i in 0..batch {
                        let dc = View::new(&gout[i * c_step..(i + 1) * c_step], m, n);
                        let bv = View::new(&bd[i * b_stride..i * b_stride + b_step], sb_rows, sb_cols);
                        // dA = dC * op(B)^T
                        let opbt = if tb { bv } else { bv.t() };
                        gemm(dc, opbt, F::one(), &mut ga[i * a_step..(i + 1) * a_step]);
                    }
                }
                if self.wants(b) {
                    let gb = buf(grads, b, bd.len());
                    for i in 0..batch {
                        let av = View::new(&ad[i * a_step..(i + 1) * a_step], m, k);
                        let dc = View::new(&gout[i * c_step..(i + 1) * c_step], m, n);
                        let dst = &mut gb[i * b_stride..i * b_stride + b_step];
                        if tb {
                            // B is [n, k]: dB = dC^T * A
                            gemm(dc.t(), av, F::one(), dst);
                        } else {
                            // B is [k, n]: dB = A^T * dC
                            gemm(av.t(), dc, F::one(), dst);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let gb = buf(grads, *b, nb);
                    for chunk in gout.chunks(nb) {
                        for (g, &d) in gb.iter_mut().zip(chunk) {
                            *g = *g + d;
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, gout_owned);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let bd = self.value(b).data();
                    let ga = buf(grads, a, gout.len());
                    for ((g, &d), &y) in ga.iter_mut().zip(gout).zip(bd) {
                        *g = *g + d * y;
                    }
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    let gb = buf(grads, b, gout.len());
                    for ((g, &d), &x) in gb.iter_mut().zip(gout).zip(ad) {
                        *g = *g + d * x;
                    }
                }
            }
            Op::Scale { a, s } => {
                let ga = buf(grads, *a, gout.len());
                for (g, &d) in ga.iter_mut().zip(gout) {
                    *g = *g + d * *s;
                }
            }
            Op::Gelu { a, tanh } => {
                let x = self.value(*a).data();
                let ga = buf(grads, *a, gout.len());
                for (((g, &d), &x), &t) in ga.iter_mut().zip(gout).zip(x).zip(tanh) {
                    *g = *g + d * gelu_grad(x, t);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let sw = self.shape(w);
                let (k, n) = (sw[0], sw[1]);
                let xd = self.value(x).data();
                let rows = xd.len() / k;
                let dc = View::new(gout, rows, n);
                if self.wants(x) {
                    let wv = View::new(self.value(w).data(), k, n);
                    gemm(dc, wv.t(), F::one(), buf(grads, x, xd.len()));
                }
                if self.wants(w) {
                    gemm(View::new(xd, rows, k).t(), dc, F::one(), buf(grads, w, k * n));
                }
                if self.wants(b) {
                    let gb = buf(grads, b, n);
                    for row in gout.chunks(n) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Attention { qkv, batch, heads, scale, probs } => {
                let qd = self.value(*qkv).data();
                let gq = buf(grads, *qkv, qd.len());
                attention_backward(qd, gout, probs, gq, *batch, *heads, *scale);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let ga = buf(grads, *a, gout.len());
                for ((gr, dr), yr) in ga.chunks_mut(d).zip(gout.chunks(d)).zip(y.chunks(d)) {
                    let dot = dr.iter().zip(yr).map(|(&g, &p)| g * p).sum::<F>();
                    for ((g, &dy), &p) in gr.iter_mut().zip(dr).zip(yr) {
                        *g = *g + p * (dy - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = node.value.last_dim();
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let inv_d = F::one() / F::from_f64(d as f64);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    for (r, (dr, xr)) in gout.chunks(d).zip(xd.chunks(d)).enumerate() {
                        for j in 0..d {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            dg[j] = dg[j] + dr[j] * xhat;
                            db[j] = db[j] + dr[j];
                        }
                    }
                    if self.wants(*gamma) {
                        for (g, v) in buf(grads, *gamma, d).iter_mut().zip(dg) {
                            *g = *g + v;
                        }
                    }
                    if self.wants(*beta) {
                        for (g, v) in buf(grads, *beta, d).iter_mut().zip(db) {
                            *g = *g + v;
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = buf(grads, *x, xd.len());
                    let mut dxhat = vec![F::zero(); d];
                    for (r, ((gr, dr), xr)) in gx.chunks_mut(d).zip(gout.chunks(d)).zip(xd.chunks(d)).enumerate() {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            dxhat[j] = dr[j] * gd[j];
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat;
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            gr[j] = gr[j] + rstd[r] * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                let n = self.value(*table).numel();
                let gt = buf(grads, *table, n);
                for (&i, dr) in ids.iter().zip(gout.chunks(d)) {
                    for (g, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(dr) {
                        *g = *g + v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, rows, probs } => {
                let v = self.value(*logits).last_dim();
                let n = self.value(*logits).numel();
                let scale = gout[0] / F::from_f64(rows.len() as f64);
                let gl = buf(grads, *logits, n);
                for ((&r, &t), pr) in rows.iter().zip(targets).zip(probs.chunks(v)) {
                    let dst = &mut gl[r * v..(r + 1) * v];
                    for (g, &p) in dst.iter_mut().zip(pr) {
                        *g = *g + p * scale;
                    }
                    dst[t] = dst[t] - scale;
                }
            }
            Op::Reshape { a } => accumulate(grads, *a, gout_owned),
            Op::SliceLast { a, start } => {
                let src_d = self.value(*a).last_dim();
                let len = node.value.last_dim();
                let n = self.value(*a).numel();
                let ga = buf(grads, *a, n);
                for (gr, dr) in ga.chunks_mut(src_d).zip(gout.chunks(len)) {
                    for (g, &d) in gr[*start..*start + len].iter_mut().zip(dr) {
                        *g = *g + d;
                    }
                }
            }
            Op::SplitHeads { a, heads } => {
                let s = self.shape(*a);
                let (b, t, d) = (s[0], s[1], s[2]);
                let hd = d / heads;
                let ga = buf(grads, *a, gout.len());
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let src = (bi * t + ti) * d + h * hd;
                            let dst = ((bi * heads + h) * t + ti) * hd;
                            for j in 0..hd {
                                ga[src + j] = ga[src + j] + gout[dst + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, heads } => {
                let s = self.shape(*a);
                let (bh, t, hd) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = heads * hd;
                let ga = buf(grads, *a, gout.len());
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let merged = (bi * t + ti) * d + h * hd;
                            let split = ((bi * heads + h) * t + ti) * hd;
                            for j in 0..hd {
                                ga[split + j] = ga[split + j] + gout[merged + j];
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let ga = buf(grads, *a, gout.len());
                for ((g, &d), &m) in ga.iter_mut().zip(gout).zip(mask) {
                    *g = *g + d * m;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                let ga = buf(grads, *a, n);
                for g in ga.iter_mut() {
                    *g = *g + gout[0];
                }
            }
        }
    }
}
