//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive records its inputs on a [`Graph`]; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients additively over
//! fan-out. Parameter leaves borrow their tensors, so building a graph
//! never copies model weights.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use statrs::function::gamma::{digamma, ln_gamma};

use super::{ComputeError, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Frozen straight-through state captured at a base point.
#[derive(Clone, Debug)]
pub struct StAnchor<T: Real> {
    pub soft: Tensor<T>,
    pub hard: Vec<bool>,
}

/// How straight-through nodes evaluate their forward value.
///
/// `Hard` is the training behaviour. `Record` behaves like `Hard` and keeps
/// an anchor per node; `Replay` re-evaluates with the recorded hard decisions
/// as `hard + (soft - anchor)`, a smooth surrogate whose exact derivative is
/// the straight-through gradient. Finite-difference checks use the last two.
#[derive(Clone, Debug)]
enum StMode<T: Real> {
    Hard,
    Record(Vec<StAnchor<T>>),
    Replay(Vec<StAnchor<T>>, usize),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Affine(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    GatherRows { table: Var, idx: Vec<usize> },
    SegmentMean { x: Var, ids: Vec<usize>, counts: Vec<usize> },
    SegmentWeighted { x: Var, w: Var, ids: Vec<usize>, sums: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor<T>, count: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Clamp { a: Var, lo: T, hi: T },
    StraightThrough(Var),
    CumsumExclusive(Var),
    BinomialNll { k: Var, grad: f64 },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward computation and its reverse pass.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<usize, Var>,
    st: StMode<T>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the parameter registered under `id`, if it was used.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }
}

fn shape_err(op: &'static str, detail: String) -> ComputeError {
    ComputeError::ShapeMismatch { op, detail }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            st: StMode::Hard,
            backward_done: false,
        }
    }

    /// Graph that records straight-through anchors (see [`StAnchor`]).
    pub fn recording() -> Self {
        Graph {
            st: StMode::Record(Vec::new()),
            ..Self::new()
        }
    }

    /// Graph that evaluates straight-through nodes against recorded anchors.
    pub fn replaying(anchors: Vec<StAnchor<T>>) -> Self {
        Graph {
            st: StMode::Replay(anchors, 0),
            ..Self::new()
        }
    }

    /// Anchors captured by a recording graph.
    pub fn take_anchors(&mut self) -> Vec<StAnchor<T>> {
        match std::mem::replace(&mut self.st, StMode::Hard) {
            StMode::Record(a) | StMode::Replay(a, _) => a,
            StMode::Hard => Vec::new(),
        }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, ComputeError> {
        if !value.is_finite() {
            return Err(ComputeError::NonFiniteValue { op: name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed parameter leaf; repeated calls with the same `id` share one node.
    pub fn param(&mut self, id: usize, value: &'p Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `op(a) * op(b)` where `ta`/`tb` transpose the operands.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (k2, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?}{} x {:?}{}", av.shape(), if ta { "^T" } else { "" }, bv.shape(), if tb { "^T" } else { "" })));
        }
        let mut out = Tensor::zeros(m, n);
        T::gemm(m, k, n, av.data(), ta, bv.data(), tb, T::zero(), out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), needs)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, ComputeError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", av.shape(), rv.shape())));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (x, &r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *x = *x + r;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push("add_row", out, Op::AddRow(a, row), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.rows(), av.cols(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), needs)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, ComputeError> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", av.shape(), cv.shape())));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            for x in out.row_mut(i) {
                *x = *x * s;
            }
        }
        let needs = self.needs(a) || self.needs(col);
        self.push("mul_col", out, Op::MulCol(a, col), needs)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var, ComputeError> {
        let out = self.value(a).map(|x| scale * x + shift);
        let needs = self.needs(a);
        self.push("affine", out, Op::Affine(a, scale), needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, ComputeError> {
        self.affine(a, s, T::zero())
    }

    /// `x * Phi(x)` with the exact normal CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var, ComputeError> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.value(a).map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        let needs = self.needs(a);
        self.push("gelu", out, Op::Gelu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, ComputeError> {
        let out = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push("sigmoid", out, Op::Sigmoid(a), needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, ComputeError> {
        let out = self.value(a).map(|x| x.ln());
        let needs = self.needs(a);
        self.push("log", out, Op::Log(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, ComputeError> {
        let out = self.value(a).map(|x| x.exp());
        let needs = self.needs(a);
        self.push("exp", out, Op::Exp(a), needs)
    }

    /// Row-wise softmax of `a + mask`.
    pub fn softmax(&mut self, a: Var, mask: Option<&Arc<Tensor<T>>>) -> Result<Var, ComputeError> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.shape() != av.shape() {
                return Err(shape_err("softmax", format!("mask {:?} for {:?}", m.shape(), av.shape())));
            }
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            if let Some(m) = mask {
                for (x, &mk) in row.iter_mut().zip(m.row(i)) {
                    *x = *x + mk;
                }
            }
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        self.push("softmax", out, Op::Softmax(a), needs)
    }

    /// Per-row normalization followed by `gamma * xhat + beta` (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.shape() != [1, c] || bv.shape() != [1, c] {
            return Err(shape_err("layer_norm", format!("{:?} with gamma {:?}", xv.shape(), gv.shape())));
        }
        let n = T::lit(c as f64);
        let mut xhat = Tensor::zeros(xv.rows(), c);
        let mut out = Tensor::zeros(xv.rows(), c);
        let mut rstds = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            rstds.push(rstd);
            for j in 0..c {
                let h = (row[j] - mean) * rstd;
                xhat.set(i, j, h);
                out.set(i, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd: rstds }, needs)
    }

    /// Output row `r` is `table` row `idx[r]` (embedding lookup, duplication).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, ComputeError> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(shape_err("gather_rows", format!("index {bad} into {} rows", tv.rows())));
        }
        let mut out = Tensor::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let needs = self.needs(table);
        self.push("gather_rows", out, Op::GatherRows { table, idx: idx.to_vec() }, needs)
    }

    fn check_segments(&self, op: &'static str, rows: usize, ids: &[usize], m: usize) -> Result<Vec<usize>, ComputeError> {
        if ids.len() != rows {
            return Err(shape_err(op, format!("{} segment ids for {rows} rows", ids.len())));
        }
        let mut counts = vec![0usize; m];
        for &j in ids {
            if j >= m {
                return Err(shape_err(op, format!("segment id {j} >= {m}")));
            }
            counts[j] += 1;
        }
        if counts.contains(&0) {
            return Err(shape_err(op, "empty segment".into()));
        }
        Ok(counts)
    }

    /// Mean of the rows of `x` sharing a segment id; output is `m x c`.
    pub fn segment_mean_pool(&mut self, x: Var, ids: &[usize], m: usize) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let counts = self.check_segments("segment_mean_pool", xv.rows(), ids, m)?;
        let mut out = Tensor::zeros(m, xv.cols());
        for (t, &j) in ids.iter().enumerate() {
            for (o, &v) in out.row_mut(j).iter_mut().zip(xv.row(t)) {
                *o = *o + v;
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            let inv = T::lit(c as f64);
            for o in out.row_mut(j) {
                *o = *o / inv;
            }
        }
        let needs = self.needs(x);
        self.push("segment_mean_pool", out, Op::SegmentMean { x, ids: ids.to_vec(), counts }, needs)
    }

    /// Weighted segment mean `sum(w_t x_t) / sum(w_t)` with `w` an `n x 1` column.
    pub fn segment_weighted_pool(&mut self, x: Var, w: Var, ids: &[usize], m: usize) -> Result<Var, ComputeError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape() != [xv.rows(), 1] {
            return Err(shape_err("segment_weighted_pool", format!("weights {:?} for {:?}", wv.shape(), xv.shape())));
        }
        self.check_segments("segment_weighted_pool", xv.rows(), ids, m)?;
        let mut sums = vec![T::zero(); m];
        let mut out = Tensor::zeros(m, xv.cols());
        for (t, &j) in ids.iter().enumerate() {
            let wt = wv.data()[t];
            sums[j] = sums[j] + wt;
            for (o, &v) in out.row_mut(j).iter_mut().zip(xv.row(t)) {
                *o = *o + wt * v;
            }
        }
        for (j, &s) in sums.iter().enumerate() {
            for o in out.row_mut(j) {
                *o = *o / s;
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.push("segment_weighted_pool", out, Op::SegmentWeighted { x, w, ids: ids.to_vec(), sums }, needs)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows with `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, ComputeError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), lv.rows())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(ComputeError::InvalidArgument("cross_entropy without targets".into()));
        }
        let mut probs = lv.clone();
        let mut total = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max.as_f64() + row.iter().map(|&v| (v - max).as_f64().exp()).sum::<f64>().ln();
            if let Some(t) = *t {
                if t >= row.len() {
                    return Err(shape_err("cross_entropy", format!("target {t} >= {}", row.len())));
                }
                total += lse - row[t].as_f64();
            }
            softmax_in_place(row);
        }
        let out = Tensor::scalar(T::lit(total / count as f64));
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            needs,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ComputeError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {}", av.cols())));
        }
        let mut out = Tensor::zeros(av.rows(), len);
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let needs = self.needs(a);
        self.push("slice_cols", out, Op::SliceCols { a, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ComputeError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, ComputeError> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(rows, cols, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, ComputeError> {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push("sum", out, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, ComputeError> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, ComputeError> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let needs = self.needs(a);
        self.push("clamp", out, Op::Clamp { a, lo, hi }, needs)
    }

    /// Hard threshold `soft >= 0.5` in the forward pass, identity gradient
    /// to `soft` in the backward pass. Returns the node and the hard decisions.
    pub fn straight_through(&mut self, soft: Var) -> Result<(Var, Vec<bool>), ComputeError> {
        let sv: &Tensor<T> = &self.nodes[soft.0].value;
        let half = T::lit(0.5);
        let (out, hard) = match &mut self.st {
            StMode::Hard | StMode::Record(_) => {
                let hard: Vec<bool> = sv.data().iter().map(|&x| x >= half).collect();
                let out = sv.map(|x| if x >= half { T::one() } else { T::zero() });
                if let StMode::Record(anchors) = &mut self.st {
                    anchors.push(StAnchor {
                        soft: sv.clone(),
                        hard: hard.clone(),
                    });
                }
                (out, hard)
            }
            StMode::Replay(anchors, cursor) => {
                let anchor = anchors.get(*cursor).ok_or(ComputeError::AnchorMismatch)?;
                if anchor.soft.shape() != sv.shape() {
                    return Err(ComputeError::AnchorMismatch);
                }
                *cursor += 1;
                let data = sv
                    .data()
                    .iter()
                    .zip(anchor.soft.data())
                    .zip(&anchor.hard)
                    .map(|((&s, &s0), &h)| if h { T::one() } else { T::zero() } + (s - s0))
                    .collect();
                (Tensor::new(sv.rows(), sv.cols(), data)?, anchor.hard.clone())
            }
        };
        let needs = self.needs(soft);
        let v = self.push("straight_through", out, Op::StraightThrough(soft), needs)?;
        Ok((v, hard))
    }

    /// `y_i = sum_{j < i} a_j` over an `n x 1` column.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var, ComputeError> {
        let av = self.value(a);
        if av.cols() != 1 {
            return Err(shape_err("cumsum_exclusive", format!("{:?} is not a column", av.shape())));
        }
        let mut acc = T::zero();
        let data = av
            .data()
            .iter()
            .map(|&x| {
                let y = acc;
                acc = acc + x;
                y
            })
            .collect();
        let out = Tensor::column(data);
        let needs = self.needs(a);
        self.push("cumsum_exclusive", out, Op::CumsumExclusive(a), needs)
    }

    /// `-ln Binomial(beta; n, k)` with `k` a differentiable `1 x 1` count,
    /// evaluated through log-gamma so that non-integer `k` is defined.
    pub fn binomial_nll(&mut self, k: Var, n: usize, beta: f64) -> Result<Var, ComputeError> {
        let kv = self.value(k);
        if kv.shape() != [1, 1] {
            return Err(shape_err("binomial_nll", format!("k has shape {:?}", kv.shape())));
        }
        let kf = kv.item().as_f64();
        let nf = n as f64;
        if !(beta > 0.0 && beta < 1.0) || !(kf > -1.0 && kf < nf + 1.0) {
            return Err(ComputeError::Domain(format!("k={kf}, n={n}, beta={beta}")));
        }
        let value = -(ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)
            + kf * beta.ln()
            + (nf - kf) * (1.0 - beta).ln());
        let grad = digamma(kf + 1.0) - digamma(nf - kf + 1.0) - beta.ln() + (1.0 - beta).ln();
        let needs = self.needs(k);
        self.push("binomial_nll", Tensor::scalar(T::lit(value)), Op::BinomialNll { k, grad }, needs)
    }

    /// Reverse pass from the scalar `loss`. A graph supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, ComputeError> {
        if self.backward_done {
            return Err(ComputeError::BackwardTwice);
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(ComputeError::NotScalar(self.value(loss).shape()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let (m, n) = (out.rows(), out.cols());
                let k = if ta { av.rows() } else { av.cols() };
                if want(a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    if ta {
                        // stored k x m: da = op(b) * g^T
                        T::gemm(k, n, m, bv.data(), tb, g.data(), true, T::zero(), da.data_mut());
                    } else {
                        T::gemm(m, n, k, g.data(), false, bv.data(), !tb, T::zero(), da.data_mut());
                    }
                    accumulate(grads, a, da);
                }
                if want(b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    if tb {
                        // stored n x k: db = g^T * op(a)
                        T::gemm(n, m, k, g.data(), true, av.data(), ta, T::zero(), db.data_mut());
                    } else {
                        T::gemm(k, m, n, av.data(), !ta, g.data(), false, T::zero(), db.data_mut());
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, a, g.clone());
                }
                if want(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::AddRow(a, row) => {
                if want(a) {
                    accumulate(grads, a, g.clone());
                }
                if want(row) {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d = *d + x;
                        }
                    }
                    accumulate(grads, row, dr);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if want(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
                }
                if want(b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, b, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
                }
            }
            &Op::MulCol(a, col) => {
                let (av, cv) = (val(a), val(col));
                if want(a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let s = cv.data()[r];
                        for x in da.row_mut(r) {
                            *x = *x * s;
                        }
                    }
                    accumulate(grads, a, da);
                }
                if want(col) {
                    let d = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    accumulate(grads, col, Tensor::column(d));
                }
            }
            &Op::Affine(a, s) => accumulate(grads, a, g.map(|x| x * s)),
            &Op::Gelu(a) => {
                let av = val(a);
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::lit(0.5);
                let d = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-half * x * x).exp();
                        gy * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(grads, a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            &Op::Sigmoid(a) => {
                let d = out.data().iter().zip(g.data()).map(|(&y, &gy)| gy * y * (T::one() - y)).collect();
                accumulate(grads, a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            &Op::Log(a) => {
                let d = val(a).data().iter().zip(g.data()).map(|(&x, &gy)| gy / x).collect();
                accumulate(grads, a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            &Op::Exp(a) => {
                let d = out.data().iter().zip(g.data()).map(|(&y, &gy)| gy * y).collect();
                accumulate(grads, a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            &Op::Softmax(a) => {
                let mut da = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in da.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *d = p * (q - dot);
                    }
                }
                accumulate(grads, a, da);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = val(*gamma);
                let c = g.cols();
                if want(*gamma) || want(*beta) {
                    let mut dg = Tensor::zeros(1, c);
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..g.rows() {
                        for j in 0..c {
                            let gy = g.get(r, j);
                            dg.data_mut()[j] = dg.data()[j] + gy * xhat.get(r, j);
                            db.data_mut()[j] = db.data()[j] + gy;
                        }
                    }
                    if want(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if want(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if want(*x) {
                    let n = T::lit(c as f64);
                    let mut dx = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        let dxhat: Vec<T> = (0..c).map(|j| g.get(r, j) * gv.data()[j]).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(&d, &h)| d * h).sum::<T>() / n;
                        for j in 0..c {
                            dx.set(r, j, rstd[r] * (dxhat[j] - mean_d - xhat.get(r, j) * mean_dx));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GatherRows { table, idx } => {
                let tv = val(*table);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d = *d + x;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::SegmentMean { x, ids, counts } => {
                let mut dx = Tensor::zeros(ids.len(), g.cols());
                for (t, &j) in ids.iter().enumerate() {
                    let inv = T::lit(counts[j] as f64);
                    for (d, &x) in dx.row_mut(t).iter_mut().zip(g.row(j)) {
                        *d = x / inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentWeighted { x, w, ids, sums } => {
                let (xv, wv) = (val(*x), val(*w));
                if want(*x) {
                    let mut dx = Tensor::zeros(ids.len(), g.cols());
                    for (t, &j) in ids.iter().enumerate() {
                        let s = wv.data()[t] / sums[j];
                        for (d, &x) in dx.row_mut(t).iter_mut().zip(g.row(j)) {
                            *d = x * s;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if want(*w) {
                    let d = ids
                        .iter()
                        .enumerate()
                        .map(|(t, &j)| {
                            let dot: T = g
                                .row(j)
                                .iter()
                                .zip(xv.row(t))
                                .zip(out.row(j))
                                .map(|((&gp, &xt), &p)| gp * (xt - p))
                                .sum();
                            dot / sums[j]
                        })
                        .collect();
                    accumulate(grads, *w, Tensor::column(d));
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let scale = g.item() / T::lit(*count as f64);
                let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = dl.row_mut(r);
                        for (d, &p) in row.iter_mut().zip(probs.row(r)) {
                            *d = p * scale;
                        }
                        row[t] = row[t] - scale;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            &Op::SliceCols { a, start } => {
                let av = val(a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if want(p) {
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(grads, p, dp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if want(p) {
                        let dp = Tensor::new(pv.rows(), pv.cols(), g.data()[off..off + n].to_vec()).expect("shape");
                        accumulate(grads, p, dp);
                    }
                    off += n;
                }
            }
            &Op::Sum(a) => {
                let av = val(a);
                accumulate(grads, a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
            &Op::Clamp { a, lo, hi } => {
                let d = val(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| if x > lo && x < hi { gy } else { T::zero() })
                    .collect();
                accumulate(grads, a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            &Op::StraightThrough(soft) => accumulate(grads, soft, g.clone()),
            &Op::CumsumExclusive(a) => {
                let mut acc = T::zero();
                let mut d = vec![T::zero(); g.len()];
                for i in (0..g.len()).rev() {
                    d[i] = acc;
                    acc = acc + g.data()[i];
                }
                accumulate(grads, a, Tensor::column(d));
            }
            &Op::BinomialNll { k, grad } => {
                accumulate(grads, k, Tensor::scalar(g.item() * T::lit(grad)));
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Additive causal mask: 0 on and below the diagonal, -1e9 above it.
pub fn causal_mask<T: Real>(n: usize) -> Arc<Tensor<T>> {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, T::lit(-1e9));
        }
    }
    Arc::new(m)
}
