//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every kernel applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! [`Gradients`] for every differentiable leaf (inputs and parameters).
//! Constants never receive gradients, and no work is spent on subgraphs that
//! do not depend on a differentiable leaf.

use std::collections::HashMap;

use super::tensor::matmul_raw;
use super::{NumError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owned set of named learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients of a backward pass into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, node) in &grads.params {
            if let Some(g) = &grads.grads[*node] {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched attention call: `batch` independent sequences of
/// `len` tokens stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per-token key validity (length `batch * len`); padded keys are never attended.
    pub key_valid: Option<Vec<bool>>,
}

enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale { x: Var, c: T },
    Gelu(Var),
    Geglu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, mask: Option<Vec<bool>> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
    SegmentMean { x: Var, segments: Vec<Vec<usize>> },
    RepeatRows { x: Var, k: usize },
    GroupMean { x: Var, k: usize },
    Gather { table: Var, idx: Vec<Option<usize>> },
    AddTiled { x: Var, tile: Var },
    SelectRows { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, allowed: Vec<bool>, probs: Vec<T> },
    SumAll(Var),
    WeightedSum { x: Var, w: Tensor<T> },
}

struct Node<T> {
    name: &'static str,
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to an input or parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, n)| self.grads[*n].as_ref())
    }
}

pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<&'static str>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn gelu_fwd<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Elementwise exact-erf GELU on plain buffers.
pub fn gelu<T: Real>(x: T) -> T {
    gelu_fwd(x)
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::Shape { op, detail }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Sum that does not depend on the order of `vals`.
fn order_free_sum<T: Real>(vals: &mut [T]) -> T {
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    vals.iter().fold(T::zero(), |acc, &v| acc + v)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: HashMap::new(), fault: None }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_vars: HashMap::new(), fault: None }
    }

    /// Deliberately negates the backward pass of every kernel named `op`.
    /// Used to show that the gradient-check harness catches a broken kernel.
    pub fn inject_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("graph has a parameter store").value(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.requires(*p));
        self.nodes.push(Node { name: op_name, value: Some(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { name: "constant", value: Some(value), op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { name: "input", value: Some(value), op: Op::Input, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "graph was built without a parameter store");
        self.nodes.push(Node { name: "param", value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = matmul_raw(self.value(a), false, self.value(b), false)?;
        self.push("matmul", out, Op::MatMul { a, b, b_trans: false }, &[a, b])
    }

    /// `a @ bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = matmul_raw(self.value(a), false, self.value(b), true)?;
        self.push("matmul", out, Op::MatMul { a, b, b_trans: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds `bias` (length `cols`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_row", format!("bias {} vs {} columns", tb.len(), tx.cols())));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        self.push("add_row", out, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, NumError> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale { x, c }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.value(x).map(gelu_fwd);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Gated GELU: splits the columns into halves `[value | gate]` and
    /// returns `value * gelu(gate)`.
    pub fn geglu(&mut self, x: Var) -> Result<Var, NumError> {
        let tx = self.value(x);
        let (r, c2) = (tx.rows(), tx.cols());
        if c2 % 2 != 0 {
            return Err(shape_err("geglu", format!("odd column count {c2}")));
        }
        let h = c2 / 2;
        let mut out = Vec::with_capacity(r * h);
        for i in 0..r {
            let row = tx.row(i);
            for j in 0..h {
                out.push(row[j] * gelu_fwd(row[h + j]));
            }
        }
        let out = Tensor::matrix(r, h, out)?;
        self.push("geglu", out, Op::Geglu(x), &[x])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NumError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (tx.rows(), tx.cols());
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layernorm", format!("affine {} / {} vs {c} columns", tg.len(), tb.len())));
        }
        let n = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat.push(xh);
                out.push(tg.data()[j] * xh + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layernorm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Row-wise softmax. Masked entries (`false`) are exactly zero; a row
    /// with no unmasked entry is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, NumError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(m) = &mask {
            if m.len() != tx.len() {
                return Err(shape_err("softmax_rows", format!("mask {} vs {} entries", m.len(), tx.len())));
            }
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = tx.row(i);
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(None, |m: Option<T>, v| {
                Some(m.map_or(v, |m| m.max(v)))
            });
            let Some(max) = max else {
                return Err(NumError::DegenerateMask { row: i });
            };
            let mut z = T::zero();
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("softmax_rows", out, Op::Softmax { x, mask }, &[x])
    }

    /// Scaled dot-product attention over `shape.batch` stacked sequences.
    ///
    /// `q`, `k`, `v` are `(batch * len) x d`; heads split the columns.
    /// A query with no attendable key (e.g. a left-padded slot under a
    /// causal mask) produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var, NumError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let rows = shape.batch * shape.len;
        let d = tq.cols();
        if tq.rows() != rows || tk.rows() != rows || tv.rows() != rows || tk.cols() != d || tv.cols() != d {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?} for {} x {}", tq.shape(), tk.shape(), tv.shape(), shape.batch, shape.len),
            ));
        }
        if shape.heads == 0 || d % shape.heads != 0 {
            return Err(NumError::Config(format!("width {d} not divisible by {} heads", shape.heads)));
        }
        if let Some(kv) = &shape.key_valid {
            if kv.len() != rows {
                return Err(shape_err("attention", format!("key mask {} vs {rows} tokens", kv.len())));
            }
        }
        let (l, h, dh) = (shape.len, shape.heads, d / shape.heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); shape.batch * h * l * l];
        let mut out = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); l];
        for b in 0..shape.batch {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..l {
                    let qi = &tq.row(b * l + i)[c0..c0 + dh];
                    let mut max: Option<T> = None;
                    for j in 0..l {
                        if !attendable(&shape, b, i, j) {
                            continue;
                        }
                        let kj = &tk.row(b * l + j)[c0..c0 + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<T>() * scale;
                        scores[j] = s;
                        max = Some(max.map_or(s, |m| m.max(s)));
                    }
                    let Some(max) = max else { continue };
                    let p = &mut probs[((b * h + head) * l + i) * l..((b * h + head) * l + i + 1) * l];
                    let mut z = T::zero();
                    for j in 0..l {
                        if attendable(&shape, b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let orow = &mut out[(b * l + i) * d + c0..(b * l + i) * d + c0 + dh];
                    for j in 0..l {
                        if p[j] == T::zero() {
                            continue;
                        }
                        p[j] /= z;
                        let vj = &tv.row(b * l + j)[c0..c0 + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p[j] * *vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, d, out)?;
        self.push("attention", out, Op::Attention { q, k, v, shape, probs }, &[q, k, v])
    }

    /// Mean of the rows listed in each segment; one output row per segment.
    /// The sum is order-independent, so permuting rows within a segment
    /// leaves the result bit-identical.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Result<Var, NumError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(segments.len() * c);
        let mut col = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(NumError::EmptySegment { segment: s });
            }
            if let Some(bad) = seg.iter().find(|&&r| r >= tx.rows()) {
                return Err(shape_err("segment_mean", format!("row {bad} out of {}", tx.rows())));
            }
            let n = T::lit(seg.len() as f64);
            for j in 0..c {
                col.clear();
                col.extend(seg.iter().map(|&r| tx.get(r, j)));
                out.push(order_free_sum(&mut col) / n);
            }
        }
        let out = Tensor::matrix(segments.len(), c, out)?;
        self.push("segment_mean", out, Op::SegmentMean { x, segments }, &[x])
    }

    /// Repeats every row `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var, NumError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.rows() * k * c);
        for i in 0..tx.rows() {
            for _ in 0..k {
                out.extend_from_slice(tx.row(i));
            }
        }
        let out = Tensor::matrix(tx.rows() * k, c, out)?;
        self.push("repeat_rows", out, Op::RepeatRows { x, k }, &[x])
    }

    /// Mean over consecutive groups of `k` rows.
    pub fn group_mean(&mut self, x: Var, k: usize) -> Result<Var, NumError> {
        let tx = self.value(x);
        if k == 0 || tx.rows() % k != 0 {
            return Err(shape_err("group_mean", format!("{} rows in groups of {k}", tx.rows())));
        }
        let (g, c) = (tx.rows() / k, tx.cols());
        let n = T::lit(k as f64);
        let mut out = vec![T::zero(); g * c];
        for gi in 0..g {
            let o = &mut out[gi * c..(gi + 1) * c];
            for r in 0..k {
                for (a, b) in o.iter_mut().zip(tx.row(gi * k + r)) {
                    *a += *b;
                }
            }
            for a in o.iter_mut() {
                *a /= n;
            }
        }
        let out = Tensor::matrix(g, c, out)?;
        self.push("group_mean", out, Op::GroupMean { x, k }, &[x])
    }

    /// Row lookup; `None` yields a zero row (padding).
    pub fn gather_rows(&mut self, table: Var, idx: Vec<Option<usize>>) -> Result<Var, NumError> {
        let tt = self.value(table);
        let c = tt.cols();
        let mut out = vec![T::zero(); idx.len() * c];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= tt.rows() {
                    return Err(shape_err("gather_rows", format!("index {i} out of {}", tt.rows())));
                }
                out[r * c..(r + 1) * c].copy_from_slice(tt.row(i));
            }
        }
        let out = Tensor::matrix(idx.len(), c, out)?;
        self.push("gather_rows", out, Op::Gather { table, idx }, &[table])
    }

    /// Adds `tile` (`L x d`) to each consecutive block of `L` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var, NumError> {
        let (tx, tt) = (self.value(x), self.value(tile));
        if tt.cols() != tx.cols() || tt.rows() == 0 || tx.rows() % tt.rows() != 0 {
            return Err(shape_err("add_tiled", format!("{:?} tiled by {:?}", tx.shape(), tt.shape())));
        }
        let mut out = tx.clone();
        let period = tt.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tt.data()[i % period];
        }
        self.push("add_tiled", out, Op::AddTiled { x, tile }, &[x, tile])
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= tx.rows() {
                return Err(shape_err("select_rows", format!("row {i} out of {}", tx.rows())));
            }
            out.extend_from_slice(tx.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, out)?;
        self.push("select_rows", out, Op::SelectRows { x, idx }, &[x])
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, where each
    /// row's softmax only ranges over its `allowed` columns.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, allowed: Vec<bool>) -> Result<Var, NumError> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r || allowed.len() != r * c || r == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{r} x {c} logits, {} targets, {} mask entries", targets.len(), allowed.len()),
            ));
        }
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for i in 0..r {
            let t = targets[i];
            if t >= c || !allowed[i * c + t] {
                return Err(shape_err("cross_entropy", format!("target {t} of row {i} is not a candidate")));
            }
            let row = tl.row(i);
            let max = (0..c).filter(|&j| allowed[i * c + j]).map(|j| row[j]).fold(row[t], T::max);
            let mut z = T::zero();
            for j in (0..c).filter(|&j| allowed[i * c + j]) {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let out = Tensor::scalar(total / T::lit(r as f64));
        self.push("cross_entropy", out, Op::CrossEntropy { logits, targets, allowed, probs }, &[logits])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// `Σ x ⊙ w` for a fixed weight tensor; turns any output into a scalar probe.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var, NumError> {
        let tx = self.value(x);
        if tx.len() != w.len() {
            return Err(shape_err("weighted_sum", format!("{} vs {} entries", tx.len(), w.len())));
        }
        let s = tx.data().iter().zip(w.data()).map(|(a, b)| *a * *b).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, w }, &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", tl.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(tl.shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.fault == Some(self.nodes[i].name) {
                self.backprop_node(i, &g.map(|v| -v), &mut grads)?;
            } else {
                self.backprop_node(i, &g, &mut grads)?;
            }
            if matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        let params = self.param_vars.iter().map(|(id, v)| (*id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumError> {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, b_trans } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let da = matmul_raw(g, false, tb, !*b_trans)?.reshape(ta.shape().to_vec())?;
                    accumulate(grads, a.0, da);
                }
                if self.requires(*b) {
                    let db = if *b_trans { matmul_raw(g, true, ta, false)? } else { matmul_raw(ta, true, g, false)? };
                    accumulate(grads, b.0, db.reshape(tb.shape().to_vec())?);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.requires(*p) {
                        accumulate(grads, p.0, g.clone());
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.requires(*x) {
                    accumulate(grads, x.0, g.clone());
                }
                if self.requires(*bias) {
                    let tb = self.value(*bias);
                    let c = tb.len();
                    let mut db = vec![T::zero(); c];
                    for (k, v) in g.data().iter().enumerate() {
                        db[k % c] += *v;
                    }
                    accumulate(grads, bias.0, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, y)| *g * *y).collect();
                    accumulate(grads, a.0, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.requires(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, y)| *g * *y).collect();
                    accumulate(grads, b.0, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::Scale { x, c } => accumulate(grads, x.0, g.map(|v| v * *c)),
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(g, x)| *g * gelu_grad(*x)).collect();
                accumulate(grads, x.0, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::Geglu(x) => {
                let tx = self.value(*x);
                let (r, h) = (tx.rows(), tx.cols() / 2);
                let mut d = vec![T::zero(); r * 2 * h];
                for i in 0..r {
                    let row = tx.row(i);
                    for j in 0..h {
                        let go = g.data()[i * h + j];
                        d[i * 2 * h + j] = go * gelu_fwd(row[h + j]);
                        d[i * 2 * h + h + j] = go * row[j] * gelu_grad(row[h + j]);
                    }
                }
                accumulate(grads, x.0, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let (r, c) = (g.rows(), g.cols());
                if self.requires(*gamma) || self.requires(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (k, gv) in g.data().iter().enumerate() {
                        dg[k % c] += *gv * xhat[k];
                        db[k % c] += *gv;
                    }
                    if self.requires(*gamma) {
                        accumulate(grads, gamma.0, Tensor::new(tg.shape().to_vec(), dg)?);
                    }
                    if self.requires(*beta) {
                        accumulate(grads, beta.0, Tensor::new(self.value(*beta).shape().to_vec(), db)?);
                    }
                }
                if self.requires(*x) {
                    let n = T::lit(c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let gi = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxh: Vec<T> = gi.iter().zip(tg.data()).map(|(a, b)| *a * *b).collect();
                        let mean_d = dxh.iter().copied().sum::<T>() / n;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / n;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, x.0, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::Softmax { x, mask } => {
                let p = out.expect("softmax output");
                let (r, c) = (p.rows(), p.cols());
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let (pi, gi) = (p.row(i), g.row(i));
                    let dot = pi.iter().zip(gi).map(|(a, b)| *a * *b).sum::<T>();
                    for j in 0..c {
                        if mask.as_ref().map_or(true, |m| m[i * c + j]) {
                            dx[i * c + j] = pi[j] * (gi[j] - dot);
                        }
                    }
                }
                accumulate(grads, x.0, Tensor::new(p.shape().to_vec(), dx)?);
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let (l, h) = (shape.len, shape.heads);
                let dh = d / h;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let n = tq.len();
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
                let mut dp = vec![T::zero(); l];
                for b in 0..shape.batch {
                    for head in 0..h {
                        let c0 = head * dh;
                        for i in 0..l {
                            let p = &probs[((b * h + head) * l + i) * l..((b * h + head) * l + i + 1) * l];
                            let gi = &g.row(b * l + i)[c0..c0 + dh];
                            let mut dot = T::zero();
                            for j in 0..l {
                                if p[j] == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let vj = &tv.row(b * l + j)[c0..c0 + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv[(b * l + j) * d + c0..(b * l + j) * d + c0 + dh];
                                for (o, gg) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * *gg;
                                }
                            }
                            let qi = &tq.row(b * l + i)[c0..c0 + dh];
                            for j in 0..l {
                                if p[j] == T::zero() {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = &tk.row(b * l + j)[c0..c0 + dh];
                                let dqi = &mut dq[(b * l + i) * d + c0..(b * l + i) * d + c0 + dh];
                                for (o, kk) in dqi.iter_mut().zip(kj) {
                                    *o += ds * *kk;
                                }
                                let dkj = &mut dk[(b * l + j) * d + c0..(b * l + j) * d + c0 + dh];
                                for (o, qq) in dkj.iter_mut().zip(qi) {
                                    *o += ds * *qq;
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if self.requires(*var) {
                        accumulate(grads, var.0, Tensor::new(self.value(*var).shape().to_vec(), buf)?);
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![T::zero(); tx.len()];
                for (s, seg) in segments.iter().enumerate() {
                    let n = T::lit(seg.len() as f64);
                    for &r in seg {
                        for j in 0..c {
                            dx[r * c + j] += g.get(s, j) / n;
                        }
                    }
                }
                accumulate(grads, x.0, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::RepeatRows { x, k } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![T::zero(); tx.len()];
                for r in 0..g.rows() {
                    let src = r / k;
                    for (o, gv) in dx[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += *gv;
                    }
                }
                accumulate(grads, x.0, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::GroupMean { x, k } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let n = T::lit(*k as f64);
                let mut dx = vec![T::zero(); tx.len()];
                for r in 0..tx.rows() {
                    for (o, gv) in dx[r * c..(r + 1) * c].iter_mut().zip(g.row(r / k)) {
                        *o = *gv / n;
                    }
                }
                accumulate(grads, x.0, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::Gather { table, idx } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut dt = vec![T::zero(); tt.len()];
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (o, gv) in dt[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                            *o += *gv;
                        }
                    }
                }
                accumulate(grads, table.0, Tensor::new(tt.shape().to_vec(), dt)?);
            }
            Op::AddTiled { x, tile } => {
                if self.requires(*x) {
                    accumulate(grads, x.0, g.clone());
                }
                if self.requires(*tile) {
                    let tt = self.value(*tile);
                    let period = tt.len();
                    let mut dt = vec![T::zero(); period];
                    for (k, gv) in g.data().iter().enumerate() {
                        dt[k % period] += *gv;
                    }
                    accumulate(grads, tile.0, Tensor::new(tt.shape().to_vec(), dt)?);
                }
            }
            Op::SelectRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![T::zero(); tx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, gv) in dx[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += *gv;
                    }
                }
                accumulate(grads, x.0, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, targets, allowed, probs } => {
                let tl = self.value(*logits);
                let (r, c) = (tl.rows(), tl.cols());
                let scale = g.item() / T::lit(r as f64);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        if allowed[i * c + j] {
                            let onehot = if j == targets[i] { T::one() } else { T::zero() };
                            d[i * c + j] = (probs[i * c + j] - onehot) * scale;
                        }
                    }
                }
                accumulate(grads, logits.0, Tensor::new(tl.shape().to_vec(), d)?);
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                accumulate(grads, x.0, Tensor::full(tx.shape(), g.item()));
            }
            Op::WeightedSum { x, w } => {
                let gv = g.item();
                accumulate(grads, x.0, w.map(|v| v * gv).reshape(self.value(*x).shape().to_vec())?);
            }
        }
        Ok(())
    }
}

fn attendable(shape: &AttnShape, b: usize, i: usize, j: usize) -> bool {
    if shape.causal && j > i {
        return false;
    }
    shape.key_valid.as_ref().map_or(true, |kv| kv[b * shape.len + j])
}
