#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_into};
use super::{Csr, EngineError, ParamStore, Tensor};

type Result<T> = std::result::Result<T, EngineError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    SoftmaxRows(Var),
    Concat(Var, Var, Axis),
    MeanRows(Var),
    SelectRows(Var, Vec<usize>),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        labels: Vec<usize>,
        probs: Tensor,
    },
    GaussianKl(Var, Var),
    SpMM(Arc<Csr>, Var),
    EdgeAttention {
        scores: Var,
        feats: Var,
        graph: Arc<Csr>,
        slope: f32,
        pre: Vec<f32>,
        alpha: Vec<f32>,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        weights: Vec<f32>,
    },
    PrependRow {
        x: Var,
        row: Var,
        group: usize,
    },
    AddTiled(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Concat(..) => "concat",
            Op::MeanRows(_) => "mean_rows",
            Op::SelectRows(..) => "select_rows",
            Op::Mse(..) => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy_loss",
            Op::GaussianKl(..) => "gaussian_kl",
            Op::SpMM(..) => "spmm",
            Op::EdgeAttention { .. } => "edge_attention",
            Op::SelfAttention { .. } => "self_attention",
            Op::PrependRow { .. } => "prepend_row",
            Op::AddTiled(..) => "add_tiled",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated record of primitive applications.
///
/// A tape built with [`Tape::inference`] treats parameters as constants and
/// never needs a backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(g) => g.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

fn relu_grad(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn leaky(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Numerically stable softmax of one row into `out`.
fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = ((x - max) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if let Some(index) = value.data().iter().position(|x| !x.is_finite()) {
            log::error!("non-finite output from {} at index {index}", op.name());
            return Err(EngineError::NonFinite {
                op: op.name(),
                index,
            });
        }
        let needs_grad = self.grad_enabled && parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            needs_grad: self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), m, k, n, &mut out);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() || bv.rows() != 1 {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= y;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = leaky(*v, slope));
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros_like(xv);
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: Axis) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = match axis {
            Axis::Rows => {
                if av.cols() != bv.cols() {
                    return Err(shape_err("concat", av, bv));
                }
                let mut data = av.data().to_vec();
                data.extend_from_slice(bv.data());
                Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)
            }
            Axis::Cols => {
                if av.rows() != bv.rows() {
                    return Err(shape_err("concat", av, bv));
                }
                let mut data = Vec::with_capacity(av.len() + bv.len());
                for r in 0..av.rows() {
                    data.extend_from_slice(av.row(r));
                    data.extend_from_slice(bv.row(r));
                }
                Tensor::matrix(av.rows(), av.cols() + bv.cols(), data)
            }
        };
        self.push(out, Op::Concat(a, b, axis), &[a, b])
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut acc = vec![0.0f64; n];
        for r in 0..m {
            for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v as f64;
            }
        }
        let out = acc.into_iter().map(|s| (s / m as f64) as f32).collect();
        self.push(Tensor::row_vector(out), Op::MeanRows(x), &[x])
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(EngineError::BadArgument {
                op: "select_rows",
                msg: "empty row selection".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(EngineError::BadArgument {
                op: "select_rows",
                msg: format!("row {bad} out of range for {:?}", xv.shape()),
            });
        }
        let out = xv.select_rows(&idx);
        self.push(out, Op::SelectRows(x, idx), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.shape() != yv.shape() {
            return Err(shape_err("mse_loss", xv, yv));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar((s / xv.len() as f64) as f32);
        self.push(out, Op::Mse(x, y), &[x, y])
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = (0..self.value(logits).rows()).collect();
        self.cross_entropy_rows(logits, rows, labels.to_vec())
    }

    /// Cross-entropy averaged over a subset of rows; `labels[i]` belongs to
    /// row `rows[i]`. Rows outside the subset get zero gradient.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        rows: Vec<usize>,
        labels: Vec<usize>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(EngineError::BadArgument {
                op: "cross_entropy_loss",
                msg: format!("{} rows vs {} labels", rows.len(), labels.len()),
            });
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(EngineError::BadArgument {
                op: "cross_entropy_loss",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= lv.rows()) {
            return Err(EngineError::BadArgument {
                op: "cross_entropy_loss",
                msg: format!("row {bad} out of range for {:?}", lv.shape()),
            });
        }
        let mut probs = Tensor::zeros(rows.len(), c);
        let mut total = 0.0f64;
        for (i, (&r, &label)) in rows.iter().zip(&labels).enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label] as f64;
            for (p, &x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x as f64 - log_z).exp() as f32;
            }
        }
        let out = Tensor::scalar((total / rows.len() as f64) as f32);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                rows,
                labels,
                probs,
            },
            &[logits],
        )
    }

    /// KL(N(mu, exp(logvar)) || N(0, 1)) summed over columns, averaged over rows.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        if mv.shape() != lv.shape() {
            return Err(shape_err("gaussian_kl", mv, lv));
        }
        let s: f64 = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| {
                let (m, l) = (m as f64, l as f64);
                0.5 * (m * m + l.exp() - l - 1.0)
            })
            .sum();
        let out = Tensor::scalar((s / mv.rows() as f64) as f32);
        self.push(out, Op::GaussianKl(mu, logvar), &[mu, logvar])
    }

    /// Sparse-dense product `A X` with the weights stored in `a`.
    pub fn spmm(&mut self, a: Arc<Csr>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if a.n != xv.rows() {
            return Err(EngineError::ShapeMismatch {
                op: "spmm",
                left: vec![a.n, a.n],
                right: xv.shape().to_vec(),
            });
        }
        let Some(vals) = a.values.as_ref() else {
            return Err(EngineError::BadArgument {
                op: "spmm",
                msg: "sparse matrix has no coefficients".into(),
            });
        };
        let d = xv.cols();
        let mut out = vec![0.0f32; a.n * d];
        let mut acc = vec![0.0f64; d];
        for i in 0..a.n {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for e in a.offsets[i]..a.offsets[i + 1] {
                let c = vals[e] as f64;
                for (s, &v) in acc.iter_mut().zip(xv.row(a.indices[e])) {
                    *s += c * v as f64;
                }
            }
            for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
        self.push(Tensor::matrix(a.n, d, out), Op::SpMM(a, x), &[x])
    }

    /// Graph attention aggregation for one head.
    ///
    /// `scores` is `N x 2`: column 0 is the destination-side term `a_1 . h_i`,
    /// column 1 the source-side term `a_2 . h_j`. For every node `i`,
    /// `e_ij = leaky_relu(scores[i,0] + scores[j,1])` over the sparsity
    /// pattern of row `i`, `alpha_i = softmax(e_i)` and the output row is
    /// `sum_j alpha_ij feats[j]`.
    pub fn edge_attention(
        &mut self,
        scores: Var,
        feats: Var,
        graph: Arc<Csr>,
        slope: f32,
    ) -> Result<Var> {
        let (sv, fv) = (self.value(scores), self.value(feats));
        if sv.rows() != graph.n || sv.cols() != 2 || fv.rows() != graph.n {
            return Err(shape_err("edge_attention", sv, fv));
        }
        if (0..graph.n).any(|i| graph.offsets[i] == graph.offsets[i + 1]) {
            return Err(EngineError::BadArgument {
                op: "edge_attention",
                msg: "every node needs at least one neighbor (add self-loops)".into(),
            });
        }
        let k = fv.cols();
        let mut pre = vec![0.0f32; graph.nnz()];
        let mut alpha = vec![0.0f32; graph.nnz()];
        let mut out = vec![0.0f32; graph.n * k];
        let mut acc = vec![0.0f64; k];
        for i in 0..graph.n {
            let (lo, hi) = (graph.offsets[i], graph.offsets[i + 1]);
            let mut e_row = Vec::with_capacity(hi - lo);
            for e in lo..hi {
                let j = graph.indices[e];
                pre[e] = sv.get(i, 0) + sv.get(j, 1);
                e_row.push(leaky(pre[e], slope));
            }
            softmax_into(&e_row, &mut alpha[lo..hi]);
            acc.iter_mut().for_each(|v| *v = 0.0);
            for e in lo..hi {
                let a = alpha[e] as f64;
                for (s, &v) in acc.iter_mut().zip(fv.row(graph.indices[e])) {
                    *s += a * v as f64;
                }
            }
            for (o, s) in out[i * k..(i + 1) * k].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
        self.push(
            Tensor::matrix(graph.n, k, out),
            Op::EdgeAttention {
                scores,
                feats,
                graph,
                slope,
                pre,
                alpha,
            },
            &[scores, feats],
        )
    }

    /// Attention coefficients of the most recent `edge_attention` output `v`,
    /// aligned with the CSR edge order.
    pub fn edge_attention_weights(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::EdgeAttention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `(B*T) x d`, consecutive groups of `tokens` rows
    /// belong to one sample. Head `h` uses columns `h*d/heads .. (h+1)*d/heads`;
    /// head outputs are written back into the same columns.
    pub fn self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() {
            return Err(shape_err("self_attention", qv, kv));
        }
        if qv.shape() != vv.shape() {
            return Err(shape_err("self_attention", qv, vv));
        }
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || tokens == 0 || qv.rows() % tokens != 0 {
            return Err(EngineError::BadArgument {
                op: "self_attention",
                msg: format!(
                    "shape {:?} incompatible with {tokens} tokens and {heads} heads",
                    qv.shape()
                ),
            });
        }
        let dh = d / heads;
        let groups = qv.rows() / tokens;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0f32; groups * heads * tokens * tokens];
        let mut out = vec![0.0f32; qv.len()];
        let mut scores = vec![0.0f32; tokens];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                let wbase = (g * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &qv.row(g * tokens + i)[c0..c0 + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(g * tokens + j)[c0..c0 + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                        *s = (dot * scale) as f32;
                    }
                    let wrow = &mut weights[wbase + i * tokens..wbase + (i + 1) * tokens];
                    softmax_into(&scores, wrow);
                    let orow = &mut out[(g * tokens + i) * d + c0..(g * tokens + i) * d + c0 + dh];
                    for c in 0..dh {
                        let s: f64 = (0..tokens)
                            .map(|j| wrow[j] as f64 * vv.row(g * tokens + j)[c0 + c] as f64)
                            .sum();
                        orow[c] = s as f32;
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::SelfAttention {
                q,
                k,
                v,
                tokens,
                heads,
                weights,
            },
            &[q, k, v],
        )
    }

    /// Attention weights of a `self_attention` output, laid out as
    /// `[group][head][query][key]`.
    pub fn self_attention_weights(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::SelfAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Inserts `row` (1 x d) before every group of `group` rows of `x`.
    pub fn prepend_row(&mut self, x: Var, row: Var, group: usize) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() || group == 0 || xv.rows() % group != 0 {
            return Err(shape_err("prepend_row", xv, rv));
        }
        let groups = xv.rows() / group;
        let d = xv.cols();
        let mut data = Vec::with_capacity((xv.rows() + groups) * d);
        for g in 0..groups {
            data.extend_from_slice(rv.data());
            for r in 0..group {
                data.extend_from_slice(xv.row(g * group + r));
            }
        }
        let out = Tensor::matrix(xv.rows() + groups, d, data);
        self.push(out, Op::PrependRow { x, row, group }, &[x, row])
    }

    /// Adds `p` (T x d) to every consecutive block of T rows of `x`.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        if xv.cols() != pv.cols() || xv.rows() % pv.rows() != 0 {
            return Err(shape_err("add_tiled", xv, pv));
        }
        let block = pv.len();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += pv.data()[i % block];
        }
        self.push(out, Op::AddTiled(x, p), &[x, p])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(EngineError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_into_many(loss, &mut [store])
    }

    /// Like [`Tape::backward_into`] for parameters spread over several
    /// stores; each parameter goes to the first store that holds its name.
    pub fn backward_into_many(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                let store = stores
                    .iter_mut()
                    .find(|s| s.contains(name))
                    .ok_or_else(|| EngineError::UnknownParam(name.clone()))?;
                store.get_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let da = matmul_a_bt(g.data(), bv.data(), m, n, k);
                    accumulate(&mut grads[a.0], Tensor::matrix(m, k, da));
                }
                if self.needs(*b) {
                    let db = matmul_at_b(av.data(), g.data(), m, k, n);
                    accumulate(&mut grads[b.0], Tensor::matrix(k, n, db));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.needs(*b) {
                    let n = g.cols();
                    let mut acc = vec![0.0f64; n];
                    for r in 0..g.rows() {
                        for (s, &v) in acc.iter_mut().zip(g.row(r)) {
                            *s += v as f64;
                        }
                    }
                    let db = acc.into_iter().map(|v| v as f32).collect::<Vec<_>>();
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads[b.0], Tensor::new(shape, db).expect("bias shape"));
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = g.clone();
                    da.data_mut()
                        .iter_mut()
                        .zip(bv.data())
                        .for_each(|(d, &y)| *d *= y);
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    db.data_mut()
                        .iter_mut()
                        .zip(av.data())
                        .for_each(|(d, &x)| *d *= x);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|d| *d *= s);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Exp(x) => {
                let mut dx = g.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(out.data())
                    .for_each(|(d, &y)| *d *= y);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(xv.data())
                    .for_each(|(d, &v)| *d *= relu_grad(v));
                accumulate(&mut grads[x.0], dx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(xv.data())
                    .for_each(|(d, &v)| *d *= leaky_grad(v, *slope));
                accumulate(&mut grads[x.0], dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Tensor::zeros_like(out);
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                        *d = (yv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Concat(a, b, axis) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = match axis {
                    Axis::Rows => {
                        let split = av.len();
                        (
                            Tensor::matrix(av.rows(), av.cols(), g.data()[..split].to_vec()),
                            Tensor::matrix(bv.rows(), bv.cols(), g.data()[split..].to_vec()),
                        )
                    }
                    Axis::Cols => {
                        let ca = av.cols();
                        let mut da = Vec::with_capacity(av.len());
                        let mut db = Vec::with_capacity(bv.len());
                        for r in 0..g.rows() {
                            da.extend_from_slice(&g.row(r)[..ca]);
                            db.extend_from_slice(&g.row(r)[ca..]);
                        }
                        (
                            Tensor::matrix(av.rows(), ca, da),
                            Tensor::matrix(bv.rows(), bv.cols(), db),
                        )
                    }
                };
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let m = xv.rows();
                let mut dx = Tensor::zeros_like(xv);
                for r in 0..m {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *d = gv / m as f32;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SelectRows(x, idx) => {
                let mut dx = Tensor::zeros_like(self.value(*x));
                for (i, &r) in idx.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Mse(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let coef = 2.0 * g.item() as f64 / xv.len() as f64;
                let diff: Vec<f32> = xv
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&a, &b)| (coef * (a as f64 - b as f64)) as f32)
                    .collect();
                let shape = xv.shape().to_vec();
                if self.needs(*y) {
                    let neg = diff.iter().map(|v| -v).collect();
                    accumulate(
                        &mut grads[y.0],
                        Tensor::new(shape.clone(), neg).expect("shape"),
                    );
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], Tensor::new(shape, diff).expect("shape"));
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let coef = g.item() / rows.len() as f32;
                let mut dx = Tensor::zeros_like(lv);
                for (i, (&r, &label)) in rows.iter().zip(labels).enumerate() {
                    let drow = dx.row_mut(r);
                    for (d, &p) in drow.iter_mut().zip(probs.row(i)) {
                        *d += coef * p;
                    }
                    drow[label] -= coef;
                }
                accumulate(&mut grads[logits.0], dx);
            }
            Op::GaussianKl(mu, logvar) => {
                let (mv, lv) = (self.value(*mu), self.value(*logvar));
                let coef = g.item() / mv.rows() as f32;
                if self.needs(*mu) {
                    let mut dm = mv.clone();
                    dm.data_mut().iter_mut().for_each(|v| *v *= coef);
                    accumulate(&mut grads[mu.0], dm);
                }
                if self.needs(*logvar) {
                    let mut dl = lv.clone();
                    dl.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = coef * 0.5 * (v.exp() - 1.0));
                    accumulate(&mut grads[logvar.0], dl);
                }
            }
            Op::SpMM(a, x) => {
                let vals = a.values.as_ref().expect("checked in forward");
                let d = g.cols();
                let mut acc = vec![0.0f64; a.n * d];
                for i in 0..a.n {
                    let gi = g.row(i);
                    for e in a.offsets[i]..a.offsets[i + 1] {
                        let j = a.indices[e];
                        let c = vals[e] as f64;
                        for (s, &gv) in acc[j * d..(j + 1) * d].iter_mut().zip(gi) {
                            *s += c * gv as f64;
                        }
                    }
                }
                let dx = acc.into_iter().map(|v| v as f32).collect();
                accumulate(&mut grads[x.0], Tensor::matrix(a.n, d, dx));
            }
            Op::EdgeAttention {
                scores,
                feats,
                graph,
                slope,
                pre,
                alpha,
            } => {
                let fv = self.value(*feats);
                let k = fv.cols();
                let mut dscores = vec![0.0f64; graph.n * 2];
                let mut dfeats = vec![0.0f64; graph.n * k];
                let mut dalpha = Vec::new();
                for i in 0..graph.n {
                    let (lo, hi) = (graph.offsets[i], graph.offsets[i + 1]);
                    let gi = g.row(i);
                    dalpha.clear();
                    for e in lo..hi {
                        let j = graph.indices[e];
                        let hj = fv.row(j);
                        let a = alpha[e] as f64;
                        let mut dot = 0.0f64;
                        for c in 0..k {
                            dfeats[j * k + c] += a * gi[c] as f64;
                            dot += gi[c] as f64 * hj[c] as f64;
                        }
                        dalpha.push(dot);
                    }
                    let weighted: f64 = (lo..hi).map(|e| alpha[e] as f64 * dalpha[e - lo]).sum();
                    for e in lo..hi {
                        let j = graph.indices[e];
                        let de = alpha[e] as f64 * (dalpha[e - lo] - weighted);
                        let dpre = de * leaky_grad(pre[e], *slope) as f64;
                        dscores[i * 2] += dpre;
                        dscores[j * 2 + 1] += dpre;
                    }
                }
                if self.needs(*scores) {
                    let ds = dscores.into_iter().map(|v| v as f32).collect();
                    accumulate(&mut grads[scores.0], Tensor::matrix(graph.n, 2, ds));
                }
                if self.needs(*feats) {
                    let df = dfeats.into_iter().map(|v| v as f32).collect();
                    accumulate(&mut grads[feats.0], Tensor::matrix(graph.n, k, df));
                }
            }
            Op::SelfAttention {
                q,
                k,
                v,
                tokens,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, d) = (*tokens, qv.cols());
                let dh = d / heads;
                let groups = qv.rows() / t;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0f64; qv.len()];
                let mut dk = vec![0.0f64; qv.len()];
                let mut dv = vec![0.0f64; qv.len()];
                let mut dw = vec![0.0f64; t];
                for grp in 0..groups {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let wbase = (grp * heads + h) * t * t;
                        for i in 0..t {
                            let gi = &g.row(grp * t + i)[c0..c0 + dh];
                            let w = &weights[wbase + i * t..wbase + (i + 1) * t];
                            for j in 0..t {
                                let rj = (grp * t + j) * d + c0;
                                let vj = &vv.row(grp * t + j)[c0..c0 + dh];
                                let mut dot = 0.0f64;
                                for c in 0..dh {
                                    dv[rj + c] += w[j] as f64 * gi[c] as f64;
                                    dot += gi[c] as f64 * vj[c] as f64;
                                }
                                dw[j] = dot;
                            }
                            let weighted: f64 = (0..t).map(|j| w[j] as f64 * dw[j]).sum();
                            let ri = (grp * t + i) * d + c0;
                            let qi = &qv.row(grp * t + i)[c0..c0 + dh];
                            for j in 0..t {
                                let ds = w[j] as f64 * (dw[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (grp * t + j) * d + c0;
                                let kj = &kv.row(grp * t + j)[c0..c0 + dh];
                                for c in 0..dh {
                                    dq[ri + c] += ds * kj[c] as f64;
                                    dk[rj + c] += ds * qi[c] as f64;
                                }
                            }
                        }
                    }
                }
                let shape = qv.shape().to_vec();
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(*var) {
                        let data = buf.into_iter().map(|x| x as f32).collect();
                        accumulate(
                            &mut grads[var.0],
                            Tensor::new(shape.clone(), data).expect("shape"),
                        );
                    }
                }
            }
            Op::PrependRow { x, row, group } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let groups = xv.rows() / group;
                let mut dx = Vec::with_capacity(xv.len());
                let mut drow = vec![0.0f64; d];
                for grp in 0..groups {
                    let base = grp * (group + 1);
                    for (s, &gv) in drow.iter_mut().zip(g.row(base)) {
                        *s += gv as f64;
                    }
                    for r in 1..=*group {
                        dx.extend_from_slice(g.row(base + r));
                    }
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], Tensor::matrix(xv.rows(), d, dx));
                }
                if self.needs(*row) {
                    let dr = drow.into_iter().map(|v| v as f32).collect();
                    accumulate(&mut grads[row.0], Tensor::row_vector(dr));
                }
            }
            Op::AddTiled(x, p) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.needs(*p) {
                    let pv = self.value(*p);
                    let block = pv.len();
                    let mut acc = vec![0.0f64; block];
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc[i % block] += gv as f64;
                    }
                    let dp = acc.into_iter().map(|v| v as f32).collect();
                    accumulate(
                        &mut grads[p.0],
                        Tensor::new(pv.shape().to_vec(), dp).expect("shape"),
                    );
                }
            }
        }
    }
}
