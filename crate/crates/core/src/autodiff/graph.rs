//! Eager computation graph with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and records the node on a
//! tape. [`Graph::backward`] walks the tape in reverse; every backward rule is
//! itself written in terms of graph operations, so with `create_graph` the
//! gradient computation is recorded and can be differentiated again. That is
//! what makes the one-step unrolled meta-gradient possible.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SqDist(Var, Var),
    Sum(Var),
    Expand(Var),
    SumRows(Var),
    SumCols(Var),
    BcastRows(Var),
    BcastCols(Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    ConcatRows(Arc<[Var]>),
    ConcatCols(Arc<[Var]>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PadRows(Var, usize),
    PadCols(Var, usize),
    LayerNorm(Var, f64),
    RowInvStd(Var, f64),
    StraightThrough(Var),
    Pick(Var, Arc<[usize]>),
    Unpick(Var, Arc<[usize]>),
    Reshape(Var),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        use Op::*;
        match self {
            Leaf | Const => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatMulNt(a, b) | MatMulTn(a, b)
            | SqDist(a, b) => {
                f(*a);
                f(*b);
            }
            ConcatRows(parts) | ConcatCols(parts) => parts.iter().for_each(|p| f(*p)),
            Scale(a, _) | Transpose(a) | Relu(a) | SoftmaxRows(a) | LogSoftmaxRows(a) | Sum(a)
            | Expand(a) | SumRows(a) | SumCols(a) | BcastRows(a) | BcastCols(a)
            | Gather(a, _) | ScatterAdd(a, _) | SliceRows(a, _) | SliceCols(a, _)
            | PadRows(a, _) | PadCols(a, _) | LayerNorm(a, _) | RowInvStd(a, _)
            | StraightThrough(a) | Pick(a, _) | Unpick(a, _) | Reshape(a) => f(*a),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of eagerly evaluated nodes.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, node: usize, detail: alloc::string::String) -> Error {
    Error::Shape { op, node: Some(node), detail }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - m);
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|&v| libm::exp(v - m)).sum();
    let lse = m + libm::log(s);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Mean and inverse standard deviation of one row.
fn row_moments(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / libm::sqrt(var + eps))
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Drops every node created after the first `len`; their `Var`s become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut rg = false;
        if self.recording {
            op.for_each_input(|v| rg |= self.nodes[v.0].requires_grad);
        }
        let op = if rg { op } else { Op::Const };
        self.nodes.push(Node { value, op, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Const, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                self.next_id(),
                alloc::format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        Ok(self.value(a).zip_map(self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn check_rank2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        if self.value(a).rank() != 2 {
            return Err(shape_err(op, self.next_id(), alloc::format!("expected a matrix, got {:?}", self.shape(a))));
        }
        Ok(self.dims(a))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_rank2("matmul", a)?;
        let (k2, n) = self.check_rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.next_id(), alloc::format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_rank2("matmul_nt", a)?;
        let (n, k2) = self.check_rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.next_id(), alloc::format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let data = tensor::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt(a, b)))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.check_rank2("matmul_tn", a)?;
        let (k2, n) = self.check_rank2("matmul_tn", b)?;
        if k != k2 {
            return Err(shape_err("matmul_tn", self.next_id(), alloc::format!("[{k}x{m}]ᵀ · [{k2}x{n}]")));
        }
        let data = tensor::matmul_tn(self.value(a).data(), self.value(b).data(), k, m, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulTn(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rank2("transpose", a)?;
        let data = tensor::transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    fn row_map(&self, a: Var, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let src = self.value(a);
        let (r, c) = src.dims2();
        let mut out = Tensor::zeros(src.shape());
        for i in 0..r {
            f(&src.data()[i * c..(i + 1) * c], &mut out.data_mut()[i * c..(i + 1) * c]);
        }
        out
    }

    /// Row-wise softmax, computed with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.row_map(a, softmax_row);
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.row_map(a, log_softmax_row);
        self.push(t, Op::LogSoftmaxRows(a))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n×d)
    /// and the rows of `b` (k×d), as an n×k matrix.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.check_rank2("sq_dist", a)?;
        let (k, d2) = self.check_rank2("sq_dist", b)?;
        if d != d2 {
            return Err(shape_err("sq_dist", self.next_id(), alloc::format!("row widths {d} and {d2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..k {
                let br = &bv[j * d..(j + 1) * d];
                out[i * k + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::SqDist(a, b)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(shape_err("expand", self.next_id(), alloc::format!("source {:?} is not a scalar", self.shape(a))));
        }
        let t = Tensor::filled(shape, self.value(a).item());
        Ok(self.push(t, Op::Expand(a)))
    }

    /// Sums over rows: n×d → d.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rank2("sum_rows", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::SumRows(a)))
    }

    /// Sums within each row: n×d → n.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_rank2("sum_cols", a)?;
        let src = self.value(a).data();
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(Tensor::vector(out), Op::SumCols(a)))
    }

    /// Repeats a d-vector as every row of an n×d matrix.
    pub fn bcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        if self.value(v).rank() != 1 {
            return Err(shape_err("bcast_rows", self.next_id(), alloc::format!("expected a vector, got {:?}", self.shape(v))));
        }
        let src = self.value(v).data();
        let d = src.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::BcastRows(v)))
    }

    /// Repeats entry i of an n-vector across row i of an n×d matrix.
    pub fn bcast_cols(&mut self, v: Var, d: usize) -> Result<Var> {
        if self.value(v).rank() != 1 {
            return Err(shape_err("bcast_cols", self.next_id(), alloc::format!("expected a vector, got {:?}", self.shape(v))));
        }
        let src = self.value(v).data();
        let n = src.len();
        let mut out = Vec::with_capacity(n * d);
        for &x in src {
            out.extend(core::iter::repeat_n(x, d));
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::BcastCols(v)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, _) = self.check_rank2("add_row_bias", x)?;
        let b = self.bcast_rows(bias, n)?;
        self.add(x, b)
    }

    /// Row gather (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.check_rank2("gather_rows", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather_rows", self.next_id(), alloc::format!("row {bad} out of {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(t, Op::Gather(table, idx.into())))
    }

    /// Adds row i of `x` into row `idx[i]` of an `rows`×d zero matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.check_rank2("scatter_add_rows", x)?;
        if n != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_add_rows", self.next_id(), alloc::format!("{n} rows scattered by {} indices into {rows}", idx.len())));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        for (i, &r) in idx.iter().enumerate() {
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::ScatterAdd(x, idx.into())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let (_, c) = self.check_rank2("concat_rows", parts[0])?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.check_rank2("concat_rows", p)?;
            if c2 != c {
                return Err(shape_err("concat_rows", self.next_id(), alloc::format!("widths {c} and {c2}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.into())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let (r, _) = self.check_rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.check_rank2("concat_cols", p)?;
            if r2 != r {
                return Err(shape_err("concat_cols", self.next_id(), alloc::format!("heights {r} and {r2}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.into())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_rank2("slice_rows", a)?;
        if start + len > r {
            return Err(shape_err("slice_rows", self.next_id(), alloc::format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_rank2("slice_cols", a)?;
        if start + len > c {
            return Err(shape_err("slice_cols", self.next_id(), alloc::format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    /// Places `a` at rows `start..` of a `total`-row zero matrix.
    pub fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.check_rank2("pad_rows", a)?;
        if start + r > total {
            return Err(shape_err("pad_rows", self.next_id(), alloc::format!("{r} rows at {start} in {total}")));
        }
        let mut out = vec![0.0; total * c];
        out[start * c..(start + r) * c].copy_from_slice(self.value(a).data());
        let t = Tensor::new(vec![total, c], out)?;
        Ok(self.push(t, Op::PadRows(a, start)))
    }

    /// Places `a` at columns `start..` of a `total`-column zero matrix.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.check_rank2("pad_cols", a)?;
        if start + c > total {
            return Err(shape_err("pad_cols", self.next_id(), alloc::format!("{c} cols at {start} in {total}")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::PadCols(a, start)))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check_rank2("layer_norm", a)?;
        let t = self.row_map(a, |x, out| {
            let (mean, inv) = row_moments(x, eps);
            for (o, &v) in out.iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        });
        Ok(self.push(t, Op::LayerNorm(a, eps)))
    }

    /// `1/sqrt(var(row) + eps)` for each row, as a vector.
    pub fn row_inv_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.check_rank2("row_inv_std", a)?;
        let src = self.value(a).data();
        let out = (0..r).map(|i| row_moments(&src[i * c..(i + 1) * c], eps).1).collect();
        Ok(self.push(Tensor::vector(out), Op::RowInvStd(a, eps)))
    }

    /// Identity on the forward pass, zero gradient on the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        // recorded as a constant: nothing upstream can receive gradient
        let t = self.value(a).clone();
        self.constant(t)
    }

    /// `soft + sg[hard - soft]`: the value is exactly `hard`, while the whole
    /// gradient is routed to `soft`.
    ///
    /// The value is copied from `hard` instead of evaluating the sum, because
    /// `s + (h - s)` is not always `h` in floating point.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        self.same_shape("straight_through", hard, soft)?;
        let t = self.value(hard).clone();
        Ok(self.push(t, Op::StraightThrough(soft)))
    }

    /// `out[i] = a[i, idx[i]]`
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.check_rank2("pick", a)?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(shape_err("pick", self.next_id(), alloc::format!("{} indices into [{r}x{c}]", idx.len())));
        }
        let src = self.value(a).data();
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        Ok(self.push(Tensor::vector(out), Op::Pick(a, idx.into())))
    }

    /// Inverse of [`Graph::pick`]: scatters a vector into an n×`cols` zero matrix.
    pub fn unpick(&mut self, v: Var, idx: &[usize], cols: usize) -> Result<Var> {
        let src = self.value(v);
        if src.rank() != 1 || src.len() != idx.len() || idx.iter().any(|&j| j >= cols) {
            return Err(shape_err("unpick", self.next_id(), alloc::format!("{:?} by {} indices", src.shape(), idx.len())));
        }
        let n = idx.len();
        let mut out = vec![0.0; n * cols];
        for (i, &j) in idx.iter().enumerate() {
            out[i * cols + j] = src.data()[i];
        }
        let t = Tensor::new(vec![n, cols], out)?;
        Ok(self.push(t, Op::Unpick(v, idx.into())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec()).map_err(|_| {
            shape_err("reshape", self.next_id(), alloc::format!("{:?} -> {:?}", self.shape(a), shape))
        })?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax_rows(logits);
        let picked = self.pick(lp, targets)?;
        let s = self.sum(picked);
        Ok(self.neg(s))
    }

    /// Mean cross-entropy of `targets` against row-wise `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        let total = self.nll(logits, targets)?;
        Ok(self.scale(total, 1.0 / n))
    }

    /// Multiplies by a fixed mask (used for dropout).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Sum of several same-shaped terms, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or(Error::Empty("add_all"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse-mode gradients of scalar `loss` with respect to `wrt`.
    ///
    /// Gradients are `None` where `loss` does not depend on the variable.
    /// With `create_graph`, the backward computation is itself recorded, so
    /// the returned gradients can be differentiated again.
    pub fn backward(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut depends = vec![false; n];
        for v in wrt {
            if v.0 < n && self.nodes[v.0].requires_grad {
                depends[v.0] = true;
            }
        }
        for i in 0..n {
            if depends[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let mut d = false;
            self.nodes[i].op.for_each_input(|v| d |= depends[v.0]);
            depends[i] = d;
        }
        let mut relevant = vec![false; n];
        relevant[loss.0] = depends[loss.0];
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            self.nodes[i].op.for_each_input(|v| {
                if depends[v.0] {
                    relevant[v.0] = true;
                }
            });
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(self.constant(Tensor::filled(&seed_shape, 1.0)));

        let was_recording = self.recording;
        self.recording = create_graph;
        let result = (|| {
            for i in (0..n).rev() {
                if !relevant[i] {
                    continue;
                }
                if let Some(g) = grads[i] {
                    self.backward_node(i, g, &mut grads, &relevant)?;
                }
            }
            Ok(())
        })();
        self.recording = was_recording;
        result?;
        Ok(wrt.iter().map(|v| if v.0 < n { grads[v.0] } else { None }).collect())
    }

    fn accum(&mut self, grads: &mut [Option<Var>], relevant: &[bool], target: Var, contrib: Var) -> Result<()> {
        if !relevant[target.0] {
            return Ok(());
        }
        grads[target.0] = Some(match grads[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    fn backward_node(&mut self, id: usize, g: Var, grads: &mut [Option<Var>], rel: &[bool]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        let y = Var(id);
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accum(grads, rel, a, g)?;
                self.accum(grads, rel, b, g)?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, rel, a, g)?;
                if rel[b.0] {
                    let ng = self.neg(g);
                    self.accum(grads, rel, b, ng)?;
                }
            }
            Op::Mul(a, b) => {
                if rel[a.0] {
                    let ga = self.mul(g, b)?;
                    self.accum(grads, rel, a, ga)?;
                }
                if rel[b.0] {
                    let gb = self.mul(g, a)?;
                    self.accum(grads, rel, b, gb)?;
                }
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, c);
                self.accum(grads, rel, a, ga)?;
            }
            Op::MatMul(a, b) => {
                if rel[a.0] {
                    let ga = self.matmul_nt(g, b)?;
                    self.accum(grads, rel, a, ga)?;
                }
                if rel[b.0] {
                    let gb = self.matmul_tn(a, g)?;
                    self.accum(grads, rel, b, gb)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if rel[a.0] {
                    let ga = self.matmul(g, b)?;
                    self.accum(grads, rel, a, ga)?;
                }
                if rel[b.0] {
                    let gb = self.matmul_tn(g, a)?;
                    self.accum(grads, rel, b, gb)?;
                }
            }
            Op::MatMulTn(a, b) => {
                if rel[a.0] {
                    let ga = self.matmul_nt(b, g)?;
                    self.accum(grads, rel, a, ga)?;
                }
                if rel[b.0] {
                    let gb = self.matmul(a, g)?;
                    self.accum(grads, rel, b, gb)?;
                }
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let ga = self.mul_const(g, mask)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let (_, d) = self.dims(a);
                let gy = self.mul(g, y)?;
                let s = self.sum_cols(gy)?;
                let sb = self.bcast_cols(s, d)?;
                let diff = self.sub(g, sb)?;
                let ga = self.mul(y, diff)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::LogSoftmaxRows(a) => {
                // g − softmax(a) ⊙ rowsum(g)
                let (_, d) = self.dims(a);
                let p = self.softmax_rows(a);
                let s = self.sum_cols(g)?;
                let sb = self.bcast_cols(s, d)?;
                let ps = self.mul(p, sb)?;
                let ga = self.sub(g, ps)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::SqDist(a, b) => {
                // ∂/∂a = 2(rowsum(G) ⊙ a − G·b), ∂/∂b = 2(colsum(G) ⊙ b − Gᵀ·a)
                let (_, d) = self.dims(a);
                if rel[a.0] {
                    let s = self.sum_cols(g)?;
                    let sb = self.bcast_cols(s, d)?;
                    let sa = self.mul(sb, a)?;
                    let gb = self.matmul(g, b)?;
                    let diff = self.sub(sa, gb)?;
                    let ga = self.scale(diff, 2.0);
                    self.accum(grads, rel, a, ga)?;
                }
                if rel[b.0] {
                    let s = self.sum_rows(g)?;
                    let sb = self.bcast_cols(s, d)?;
                    let sbb = self.mul(sb, b)?;
                    let ga = self.matmul_tn(g, a)?;
                    let diff = self.sub(sbb, ga)?;
                    let gb = self.scale(diff, 2.0);
                    self.accum(grads, rel, b, gb)?;
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.expand(g, &shape)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::Expand(a) => {
                let s = self.sum(g);
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(s, &shape)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::SumRows(a) => {
                let (r, _) = self.dims(a);
                let ga = self.bcast_rows(g, r)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::SumCols(a) => {
                let (_, c) = self.dims(a);
                let ga = self.bcast_cols(g, c)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::BcastRows(v) => {
                let gv = self.sum_rows(g)?;
                self.accum(grads, rel, v, gv)?;
            }
            Op::BcastCols(v) => {
                let gv = self.sum_cols(g)?;
                self.accum(grads, rel, v, gv)?;
            }
            Op::Gather(t, idx) => {
                let (rows, _) = self.dims(t);
                let gt = self.scatter_add_rows(g, &idx, rows)?;
                self.accum(grads, rel, t, gt)?;
            }
            Op::ScatterAdd(x, idx) => {
                let gx = self.gather_rows(g, &idx)?;
                self.accum(grads, rel, x, gx)?;
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let (r, _) = self.dims(p);
                    if rel[p.0] {
                        let gp = self.slice_rows(g, off, r)?;
                        self.accum(grads, rel, p, gp)?;
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let (_, c) = self.dims(p);
                    if rel[p.0] {
                        let gp = self.slice_cols(g, off, c)?;
                        self.accum(grads, rel, p, gp)?;
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, _) = self.dims(a);
                let ga = self.pad_rows(g, start, r)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::SliceCols(a, start) => {
                let (_, c) = self.dims(a);
                let ga = self.pad_cols(g, start, c)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::PadRows(a, start) => {
                let (r, _) = self.dims(a);
                let ga = self.slice_rows(g, start, r)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::PadCols(a, start) => {
                let (_, c) = self.dims(a);
                let ga = self.slice_cols(g, start, c)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::LayerNorm(a, eps) => {
                // s ⊙ (g − mean(g) − y ⊙ mean(g ⊙ y)), s = 1/σ per row
                let (_, d) = self.dims(a);
                let inv_d = 1.0 / d as f64;
                let s = self.row_inv_std(a, eps)?;
                let gsum = self.sum_cols(g)?;
                let gmean = self.scale(gsum, inv_d);
                let gmean_b = self.bcast_cols(gmean, d)?;
                let gy = self.mul(g, y)?;
                let gysum = self.sum_cols(gy)?;
                let gymean = self.scale(gysum, inv_d);
                let gymean_b = self.bcast_cols(gymean, d)?;
                let ygy = self.mul(y, gymean_b)?;
                let t1 = self.sub(g, gmean_b)?;
                let t2 = self.sub(t1, ygy)?;
                let sb = self.bcast_cols(s, d)?;
                let ga = self.mul(sb, t2)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::RowInvStd(a, eps) => {
                // ∂s/∂x = −(s²/d)·x̂
                let (_, d) = self.dims(a);
                let gs = self.mul(g, y)?;
                let gss = self.mul(gs, y)?;
                let coef = self.scale(gss, -1.0 / d as f64);
                let cb = self.bcast_cols(coef, d)?;
                let xhat = self.layer_norm(a, eps)?;
                let ga = self.mul(cb, xhat)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::StraightThrough(soft) => {
                self.accum(grads, rel, soft, g)?;
            }
            Op::Pick(a, idx) => {
                let (_, c) = self.dims(a);
                let ga = self.unpick(g, &idx, c)?;
                self.accum(grads, rel, a, ga)?;
            }
            Op::Unpick(v, idx) => {
                let gv = self.pick(g, &idx)?;
                self.accum(grads, rel, v, gv)?;
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape)?;
                self.accum(grads, rel, a, ga)?;
            }
        }
        Ok(())
    }
}
