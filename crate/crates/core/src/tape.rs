//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so replaying the tape backwards is
//! a valid topological order. Ops are coarse (fused attention, layer norm,
//! rotary rotation) to keep the tape short for transformer-sized graphs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::posenc::{rotate_pairs, sigmoid, RotaryFrequencies};
use crate::tensor::{axis_split, gemm, gemm_view, row_moments, softmax_strided, MatMut, MatRef, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which (query, key) pairs may interact in attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub causal: bool,
    /// Keys before this index are padding: hidden from every query at or past
    /// it. Padding queries still see each other so no row is empty.
    pub key_start: usize,
}

impl AttnMask {
    pub const FULL: AttnMask = AttnMask {
        causal: false,
        key_start: 0,
    };
    pub const CAUSAL: AttnMask = AttnMask {
        causal: true,
        key_start: 0,
    };

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        (!self.causal || key <= query) && (key >= self.key_start || query < self.key_start)
    }
}

/// Attention probabilities stored by an attention node, `[heads, n, n]`.
pub struct AttentionProbs<'a> {
    pub n_heads: usize,
    pub n: usize,
    pub data: &'a [f64],
}

impl AttentionProbs<'_> {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.n + query) * self.n;
        &self.data[start..start + self.n]
    }
}

struct CopeCache {
    gates: Vec<f64>,
    positions: Vec<f64>,
    clamped: Vec<bool>,
    pos_logits: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: f64 },
    DivScalar { x: Var, s: Var },
    Gelu { x: Var },
    Square { x: Var },
    Sqrt { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MeanRows { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRow { x: Var, row: usize },
    Diagonal { x: Var },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Rope { x: Var, n_heads: usize, cos: Vec<f64>, sin: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, mask: AttnMask, probs: Vec<f64> },
    CopeAttention { q: Var, k: Var, v: Var, table: Var, n_heads: usize, mask: AttnMask, probs: Vec<f64>, cache: CopeCache },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | MatMulNT { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            AddRow { x, row } => vec![*x, *row],
            DivScalar { x, s } => vec![*x, *s],
            Scale { x, .. }
            | Gelu { x }
            | Square { x }
            | Sqrt { x }
            | Sum { x }
            | Mean { x }
            | MeanRows { x }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | SelectRow { x, .. }
            | Diagonal { x }
            | L2NormalizeRows { x, .. }
            | Rope { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Embedding { table, .. } => vec![*table],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            CopeAttention { q, k, v, table, .. } => vec![*q, *k, *v, *table],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations and replays them in reverse to produce gradients.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    /// A leaf whose gradient is collected by [`GradTape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    /// Leaf backed by a tensor shared with other tapes; no copy is made.
    pub fn shared(&mut self, value: &Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_leaf(Arc::clone(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), false, self.data(b), false, 0.0, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, "matmul")
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dims("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), false, self.data(b), true, 0.0, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT { a, b }, "matmul_nt")
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2(x)?;
        let (k2, n) = self.dims2(w)?;
        if k != k2 {
            return Err(Error::dims("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.data(b);
            if bias.len() != n {
                return Err(Error::dims("linear bias", self.shape(w), self.shape(b)));
            }
            for row in out.chunks_mut(n.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, 1.0, self.data(x), false, self.data(w), false, 1.0, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, "linear")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, "mul")
    }

    /// Adds a length-`n` vector to every row of `x: [m, n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let r = self.data(row);
        if r.len() != n {
            return Err(Error::dims("add_row", self.shape(x), self.shape(row)));
        }
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (d, v) in chunk.iter_mut().zip(r) {
                *d += v;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::AddRow { x, row }, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale { x, c }, "scale")
    }

    /// Divides every entry by the single-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let t = self.map(x, |v| v / sv);
        self.push(t, Op::DivScalar { x, s }, "div_scalar")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()));
        self.push(t, Op::Gelu { x }, "gelu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v * v);
        self.push(t, Op::Square { x }, "square")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|v| *v < 0.0) {
            return Err(Error::DegenerateInput("sqrt of a negative value".into()));
        }
        let t = self.map(x, f64::sqrt);
        self.push(t, Op::Sqrt { x }, "sqrt")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(Error::DegenerateInput("mean of an empty tensor".into()));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, "mean")
    }

    /// Column means of `x: [m, n]`, shaped `[1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m == 0 {
            return Err(Error::DegenerateInput("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows { x }, "mean_rows")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        self.push(t, Op::Softmax { x, axis }, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |l: usize| base + l * inner;
                let max = (0..len).map(|l| out[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow("log_softmax"));
                }
                let lse = max + (0..len).map(|l| (out[idx(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[idx(l)] -= lse;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, "log_softmax")
    }

    /// Layer normalization over the last dimension of `x`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if self.data(gain).len() != d || self.data(bias).len() != d {
            return Err(Error::dims("layer_norm", &shape, self.shape(gain)));
        }
        let rows = self.data(x).len() / d.max(1);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (xs, g, b) = (self.data(x), self.data(gain), self.data(bias));
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let (mean, rs) = row_moments(row, eps);
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            "layer_norm",
        )
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            "embedding",
        )
    }

    /// Row `row` of a matrix, shaped `[1, n]`.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if row >= m {
            return Err(Error::Index(format!("row {row} of a {m}-row matrix")));
        }
        let t = Tensor::new(vec![1, n], self.value(x).row(row).to_vec())?;
        self.push(t, Op::SelectRow { x, row }, "select_row")
    }

    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m != n {
            return Err(Error::dims("diagonal", self.shape(x), &[m, m]));
        }
        let d = self.data(x);
        let diag = (0..n).map(|i| d[i * n + i]).collect();
        self.push(Tensor::vector(diag), Op::Diagonal { x }, "diagonal")
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput("cannot normalize a zero-norm row".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::L2NormalizeRows { x, norms }, "l2_normalize_rows")
    }

    /// Rotates every head of `x: [n, heads * head_dim]`; row `r` sits at
    /// position `positions[r]`.
    pub fn rope(&mut self, x: Var, n_heads: usize, freqs: &RotaryFrequencies, positions: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if n_heads == 0 || d % n_heads != 0 || d / n_heads != freqs.dim() {
            return Err(Error::dims("rope", self.shape(x), &[n_heads, freqs.dim()]));
        }
        if positions.len() != n {
            return Err(Error::dims("rope positions", self.shape(x), &[positions.len()]));
        }
        let dh = freqs.dim();
        let half = dh / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            let (c, s) = freqs.cos_sin(p);
            cos.extend(c);
            sin.extend(s);
        }
        let mut out = self.data(x).to_vec();
        for r in 0..n {
            let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            for head in out[r * d..(r + 1) * d].chunks_exact_mut(dh) {
                rotate_pairs(head, c, s);
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::Rope { x, n_heads, cos, sin }, "rope")
    }

    fn check_qkv(&self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<(usize, usize)> {
        let (n, d) = self.dims2(q)?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::dims("attention", self.shape(q), self.shape(k)));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!("{d} features cannot split into {n_heads} heads")));
        }
        if n == 0 {
            return Err(Error::DegenerateInput("attention over an empty sequence".into()));
        }
        Ok((n, d))
    }

    /// Multi-head scaled dot-product attention over `q, k, v: [n, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, mask: AttnMask) -> Result<Var> {
        let (n, d) = self.check_qkv(q, k, v, n_heads)?;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n_heads * n * n];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for h in 0..n_heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm_view(
                n,
                dh,
                n,
                scale,
                MatRef::cols_of(qd, d, h * dh),
                MatRef::cols_of(kd, d, h * dh).t(),
                0.0,
                MatMut::row_major(p, n),
            );
            for i in 0..n {
                for j in 0..n {
                    if !mask.allowed(i, j) {
                        p[i * n + j] = f64::NEG_INFINITY;
                    }
                }
                softmax_strided(p, i * n, n, 1)?;
            }
            gemm_view(
                n,
                n,
                dh,
                1.0,
                MatRef::row_major(p, n),
                MatRef::cols_of(vd, d, h * dh),
                0.0,
                MatMut::cols_of(&mut out, d, h * dh),
            );
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::Attention { q, k, v, n_heads, mask, probs }, "attention")
    }

    /// Multi-head attention with contextual positions. `table` holds one
    /// position-embedding table per head, `[heads, p_max + 1, head_dim]`.
    pub fn cope_attention(&mut self, q: Var, k: Var, v: Var, table: Var, n_heads: usize, mask: AttnMask) -> Result<Var> {
        let (n, d) = self.check_qkv(q, k, v, n_heads)?;
        let dh = d / n_heads;
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 3 || tshape[0] != n_heads || tshape[2] != dh || tshape[1] == 0 {
            return Err(Error::dims("cope_attention table", &tshape, &[n_heads, 0, dh]));
        }
        let npos = tshape[1];
        let p_max = (npos - 1) as f64;
        let scale = 1.0 / (dh as f64).sqrt();
        let nn = n * n;
        let mut probs = vec![0.0; n_heads * nn];
        let mut cache = CopeCache {
            gates: vec![0.0; n_heads * nn],
            positions: vec![0.0; n_heads * nn],
            clamped: vec![false; n_heads * nn],
            pos_logits: vec![0.0; n_heads * n * npos],
        };
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd, td) = (self.data(q), self.data(k), self.data(v), self.data(table));
        for h in 0..n_heads {
            let p = &mut probs[h * nn..(h + 1) * nn];
            gemm_view(
                n,
                dh,
                n,
                scale,
                MatRef::cols_of(qd, d, h * dh),
                MatRef::cols_of(kd, d, h * dh).t(),
                0.0,
                MatMut::row_major(p, n),
            );
            let lg = &mut cache.pos_logits[h * n * npos..(h + 1) * n * npos];
            let tab = &td[h * npos * dh..(h + 1) * npos * dh];
            gemm_view(
                n,
                dh,
                npos,
                1.0,
                MatRef::cols_of(qd, d, h * dh),
                MatRef::row_major(tab, dh).t(),
                0.0,
                MatMut::row_major(lg, npos),
            );
            for i in 0..n {
                let row = i * n;
                let mut acc = 0.0;
                for j in (0..n).rev() {
                    let idx = h * nn + row + j;
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let g = sigmoid(p[row + j]);
                    cache.gates[idx] = g;
                    acc += g;
                    let clamped = acc > p_max;
                    let pos = acc.min(p_max);
                    cache.clamped[idx] = clamped;
                    cache.positions[idx] = pos;
                    let lo = pos.floor() as usize;
                    let hi = pos.ceil() as usize;
                    let w = pos - lo as f64;
                    let l = &lg[i * npos..(i + 1) * npos];
                    p[row + j] += l[lo] * (1.0 - w) + l[hi] * w;
                }
                for j in 0..n {
                    if !mask.allowed(i, j) {
                        p[row + j] = f64::NEG_INFINITY;
                    }
                }
                softmax_strided(p, row, n, 1)?;
            }
            gemm_view(
                n,
                n,
                dh,
                1.0,
                MatRef::row_major(p, n),
                MatRef::cols_of(vd, d, h * dh),
                0.0,
                MatMut::cols_of(&mut out, d, h * dh),
            );
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(
            t,
            Op::CopeAttention { q, k, v, table, n_heads, mask, probs, cache },
            "cope_attention",
        )
    }

    /// Attention probabilities recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention { n_heads, probs, .. } | Op::CopeAttention { n_heads, probs, .. } => {
                let n = self.nodes[v.0].value.shape()[0];
                Some(AttentionProbs {
                    n_heads: *n_heads,
                    n,
                    data: probs,
                })
            }
            _ => None,
        }
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::new(self.shape(loss).to_vec(), vec![1.0])?;
        self.backward_with_seed(loss, seed)
    }

    /// Backpropagates an upstream gradient `seed` (same shape as `root`).
    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::dims("backward seed", seed.shape(), self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.into_data());
        for idx in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_deref() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, g, lower);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(())
    }

    /// Gradient of a node after [`GradTape::backward`], if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when nothing flowed to it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = lower[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = self.shape(*b)[1];
                acc(*a, &mut |da| gemm(m, n, k, 1.0, g, false, self.data(*b), true, 1.0, da));
                acc(*b, &mut |db| gemm(k, m, n, 1.0, self.data(*a), true, g, false, 1.0, db));
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = self.shape(*b)[0];
                acc(*a, &mut |da| gemm(m, n, k, 1.0, g, false, self.data(*b), false, 1.0, da));
                acc(*b, &mut |db| gemm(n, m, k, 1.0, g, true, self.data(*a), false, 1.0, db));
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims2(*x).unwrap();
                let n = self.shape(*w)[1];
                acc(*x, &mut |dx| gemm(m, n, k, 1.0, g, false, self.data(*w), true, 1.0, dx));
                acc(*w, &mut |dw| gemm(k, m, n, 1.0, self.data(*x), true, g, false, 1.0, dw));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(n.max(1)) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { x, row } => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = self.data(*row).len();
                acc(*row, &mut |dr| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::DivScalar { x, s } => {
                let sv = self.data(*s)[0];
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v / sv));
                if needs(*s) {
                    let ds: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / sv;
                    acc(*s, &mut |d| d[0] -= ds);
                }
            }
            Op::Gelu { x } => {
                let xv = self.data(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        let v = xv[i];
                        let t = (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        dx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Square { x } => {
                let xv = self.data(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += 2.0 * xv[i] * g[i];
                    }
                });
            }
            Op::Sqrt { x } => acc(*x, &mut |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] / (2.0 * y[i]);
                }
            }),
            Op::Sum { x } => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x } => acc(*x, &mut |dx| {
                let c = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += c);
            }),
            Op::MeanRows { x } => {
                let (m, n) = self.dims2(*x).unwrap();
                acc(*x, &mut |dx| {
                    for row in dx.chunks_mut(n.max(1)) {
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d += gv / m as f64;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                            for l in 0..len {
                                let id = base + l * inner;
                                dx[id] += y[id] * (g[id] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let total: f64 = (0..len).map(|l| g[base + l * inner]).sum();
                            for l in 0..len {
                                let id = base + l * inner;
                                dx[id] += g[id] - y[id].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.data(*gain);
                let d = gv.len();
                acc(*x, &mut |dx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] += rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SelectRow { x, row } => {
                let n = g.len();
                acc(*x, &mut |dx| add_into(&mut dx[row * n..(row + 1) * n], g));
            }
            Op::Diagonal { x } => {
                let n = g.len();
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        dx[i * n + i] += g[i];
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |dx| {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Rope { x, n_heads, cos, sin } => {
                let (n, d) = self.dims2(*x).unwrap();
                let dh = d / n_heads;
                let half = dh / 2;
                acc(*x, &mut |dx| {
                    let mut tmp = g.to_vec();
                    for r in 0..n {
                        let c = &cos[r * half..(r + 1) * half];
                        let s: Vec<f64> = sin[r * half..(r + 1) * half].iter().map(|v| -v).collect();
                        for head in tmp[r * d..(r + 1) * d].chunks_exact_mut(dh) {
                            rotate_pairs(head, c, &s);
                        }
                    }
                    add_into(dx, &tmp);
                });
            }
            Op::Attention { q, k, v, n_heads, mask, probs } => {
                let (n, d) = self.dims2(*q).unwrap();
                let grads = attention_backward(
                    g,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    n,
                    d,
                    *n_heads,
                    mask,
                    None,
                );
                acc(*q, &mut |dq| add_into(dq, &grads.dq));
                acc(*k, &mut |dk| add_into(dk, &grads.dk));
                acc(*v, &mut |dv| add_into(dv, &grads.dv));
            }
            Op::CopeAttention { q, k, v, table, n_heads, mask, probs, cache } => {
                let (n, d) = self.dims2(*q).unwrap();
                let grads = attention_backward(
                    g,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    n,
                    d,
                    *n_heads,
                    mask,
                    Some((cache, self.data(*table), self.shape(*table)[1])),
                );
                acc(*q, &mut |dq| add_into(dq, &grads.dq));
                acc(*k, &mut |dk| add_into(dk, &grads.dk));
                acc(*v, &mut |dv| add_into(dv, &grads.dv));
                acc(*table, &mut |dt| add_into(dt, &grads.dtable));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

struct AttnGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dtable: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    n: usize,
    d: usize,
    n_heads: usize,
    mask: &AttnMask,
    cope: Option<(&CopeCache, &[f64], usize)>,
) -> AttnGrads {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nn = n * n;
    let mut out = AttnGrads {
        dq: vec![0.0; n * d],
        dk: vec![0.0; n * d],
        dv: vec![0.0; n * d],
        dtable: cope.map_or(Vec::new(), |(_, t, _)| vec![0.0; t.len()]),
    };
    let mut dp = vec![0.0; nn];
    for h in 0..n_heads {
        let p = &probs[h * nn..(h + 1) * nn];
        let col = h * dh;
        gemm_view(
            n,
            dh,
            n,
            1.0,
            MatRef::cols_of(g, d, col),
            MatRef::cols_of(v, d, col).t(),
            0.0,
            MatMut::row_major(&mut dp, n),
        );
        gemm_view(
            n,
            n,
            dh,
            1.0,
            MatRef::row_major(p, n).t(),
            MatRef::cols_of(g, d, col),
            1.0,
            MatMut::cols_of(&mut out.dv, d, col),
        );
        // dp becomes the gradient of the pre-softmax logits.
        for i in 0..n {
            let row = &mut dp[i * n..(i + 1) * n];
            let pr = &p[i * n..(i + 1) * n];
            let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                row[j] = pr[j] * (row[j] - dot);
            }
        }
        let mut ds = dp.clone();
        if let Some((cache, table, npos)) = cope {
            let lg = &cache.pos_logits[h * n * npos..(h + 1) * n * npos];
            let mut dl = vec![0.0; n * npos];
            for i in 0..n {
                let mut dpos = vec![0.0; n];
                for j in 0..n {
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let idx = h * nn + i * n + j;
                    let da = dp[i * n + j];
                    let pos = cache.positions[idx];
                    let lo = pos.floor() as usize;
                    let hi = pos.ceil() as usize;
                    let w = pos - lo as f64;
                    dl[i * npos + lo] += da * (1.0 - w);
                    dl[i * npos + hi] += da * w;
                    if !cache.clamped[idx] {
                        dpos[j] = da * (lg[i * npos + hi] - lg[i * npos + lo]);
                    }
                }
                // A key's position sums the gates from it to the query, so a
                // gate collects the position gradients of every older key.
                let mut running = 0.0;
                for t in 0..n {
                    if !mask.allowed(i, t) {
                        continue;
                    }
                    running += dpos[t];
                    let gate = cache.gates[h * nn + i * n + t];
                    ds[i * n + t] += running * gate * (1.0 - gate);
                }
            }
            let tab = &table[h * npos * dh..(h + 1) * npos * dh];
            gemm_view(
                n,
                npos,
                dh,
                1.0,
                MatRef::row_major(&dl, npos),
                MatRef::row_major(tab, dh),
                1.0,
                MatMut::cols_of(&mut out.dq, d, col),
            );
            gemm_view(
                npos,
                n,
                dh,
                1.0,
                MatRef::row_major(&dl, npos).t(),
                MatRef::cols_of(q, d, col),
                1.0,
                MatMut::row_major(&mut out.dtable[h * npos * dh..(h + 1) * npos * dh], dh),
            );
        }
        gemm_view(
            n,
            n,
            dh,
            scale,
            MatRef::row_major(&ds, n),
            MatRef::cols_of(k, d, col),
            1.0,
            MatMut::cols_of(&mut out.dq, d, col),
        );
        gemm_view(
            n,
            n,
            dh,
            scale,
            MatRef::row_major(&ds, n).t(),
            MatRef::cols_of(q, d, col),
            1.0,
            MatMut::cols_of(&mut out.dk, d, col),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::ones(&[2]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_some());
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::vector(vec![1.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.div_scalar(x, z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = GradTape::new();
        let q = tape.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let out = tape.attention(q, q, q, 2, AttnMask::CAUSAL).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        assert_eq!(probs.row(0, 0), &[1.0]);
        assert_eq!(probs.row(1, 0), &[1.0]);
    }

    #[test]
    fn padding_mask_hides_prefix_keys() {
        let mask = AttnMask {
            causal: true,
            key_start: 2,
        };
        assert!(mask.allowed(1, 0));
        assert!(!mask.allowed(3, 1));
        assert!(mask.allowed(3, 2));
        assert!(!mask.allowed(2, 3));
    }
}
