//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the tape once in reverse and accumulates adjoints into every node
//! that (transitively) depends on a trainable leaf.
//!
//! Parameters enter the tape by reference through [`Graph::param`]; the same
//! tensor registered twice maps onto the same leaf, and its gradient can be
//! read back with [`Gradients::get`] keyed by the tensor itself.
//!
//! Differentiable primitives:
//!
//! | primitive | method |
//! |---|---|
//! | matrix multiply | [`Graph::matmul`] |
//! | transpose | [`Graph::transpose`] |
//! | elementwise add / sub / mul | [`Graph::add`], [`Graph::sub`], [`Graph::mul`] |
//! | row-broadcast bias | [`Graph::add_row`] |
//! | scalar scale, scale by a scalar node, `c - x` | [`Graph::scale`], [`Graph::scale_by`], [`Graph::rsub`] |
//! | exponential, ReLU, sigmoid | [`Graph::exp`], [`Graph::relu`], [`Graph::sigmoid`] |
//! | row-wise softmax | [`Graph::softmax_rows`] |
//! | row-wise top-k (indices, non-differentiable) + gather | [`topk_rows`], [`Graph::gather_cols`] |
//! | sparse neighbour aggregation | [`Graph::sparse_aggregate`] |
//! | L1 row normalisation with additive ε | [`Graph::l1_normalize_rows`] |
//! | L2 row normalisation | [`Graph::l2_normalize_rows`] |
//! | squared L2 norm, sum, mean | [`Graph::sum_sq`], [`Graph::sum`], [`Graph::mean`] |
//! | mean over rows | [`Graph::mean_rows`] |
//! | cosine similarity of row pairs | [`Graph::cosine_rows`] |
//! | squared Frobenius norm of a difference | [`Graph::frob_sq_diff`] |
//! | concatenation | [`Graph::concat_rows`], [`Graph::concat_cols`] |
//! | slicing | [`Graph::slice_rows`], [`Graph::slice_cols`] |
//! | layer norm over rows | [`Graph::layer_norm_rows`] |
//! | stop-gradient | [`Graph::stop_grad`] |
//! | dropout | [`Graph::dropout`] |

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: u32,
    graph: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    RSub(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Gather(Var, Arc<Vec<Vec<usize>>>),
    SparseAggregate(Var, Var, Arc<Vec<Vec<usize>>>),
    L1NormRows(Var, f64),
    L2NormRows(Var),
    SumSq(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CosineRows(Var, Var),
    FrobSqDiff(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    StopGrad,
    Dropout(Var, Vec<f64>),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// A recording tape. One graph per forward pass; not shared across threads.
pub struct Graph<'p> {
    id: u32,
    nodes: Vec<Node<'p>>,
    leaf_keys: HashMap<usize, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn key_of(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            context: format!("output of {op}, flat index {i}"),
        }),
    }
}

fn dims_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

/// `c[m,n] += a[m,k] @ b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] @ b[k,n]^T`, via an explicit transpose so the inner
/// loop is the same axpy as [`gemm_acc`].
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    let mut bt = vec![0.0; n * k];
    for j in 0..k {
        for p in 0..n {
            bt[p * k + j] = b[j * n + p];
        }
    }
    gemm_acc(a, &bt, c, m, n, k);
}

/// `c[k,n] += a[m,k]^T @ b[m,n]`
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-wise top-k column indices, largest first; ties go to the smaller index.
pub fn topk_rows(values: &[f64], rows: usize, cols: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > cols {
        return Err(Error::Invalid(format!("top-k needs 1 <= k <= {cols}, got k={k}")));
    }
    Ok((0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut order: Vec<usize> = (0..cols).collect();
            // stable sort keeps ascending index order among equal values
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(k);
            order
        })
        .collect())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_keys: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<'p> {
        debug_assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.idx as usize]
    }

    fn push(&mut self, op: Op, name: &'static str, value: Cow<'p, [f64]>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        let (rows, cols) = dims_of(&shape);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            rows,
            cols,
            shape,
            op,
            requires_grad,
        });
        Ok(Var { idx, graph: self.id })
    }

    fn owned(&mut self, op: Op, name: &'static str, value: Vec<f64>, shape: Vec<usize>, rg: bool) -> Result<Var> {
        self.push(op, name, Cow::Owned(value), shape, rg)
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Registers a parameter by reference. Registering the same tensor again
    /// returns the existing leaf.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let key = key_of(t);
        if let Some(&v) = self.leaf_keys.get(&key) {
            return v;
        }
        let v = self
            .push(Op::Leaf, "param", Cow::Borrowed(t.data()), t.shape().to_vec(), t.requires_grad)
            .expect("tensor invariants guarantee finite values");
        self.leaf_keys.insert(key, v);
        v
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.owned(Op::Leaf, "constant", t.into_data(), shape, false)
    }

    pub fn constant_slice(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {} values", data.len())));
        }
        self.owned(Op::Leaf, "constant", data.to_vec(), shape.to_vec(), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.to_vec()).expect("graph values are finite")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.owned(Op::Matmul(a, b), "matmul", out, vec![m, n], rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.owned(Op::Transpose(a), "transpose", out, vec![n, m], rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.owned(op, name, out, shape, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.node(b).value.len() != n {
            return Err(Error::shape("add_row", format!("[{m},{n}] + {:?}", self.shape(b))));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            for (o, &bb) in out[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        self.owned(Op::AddRow(x, b), "add_row", out, shape, rg)
    }

    fn map(&mut self, op: Op, name: &'static str, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.owned(op, name, out, shape, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(Op::Scale(x, c), "scale", x, |v| v * c)
    }

    /// `s * x` where `s` is a single-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let out: Vec<f64> = self.value(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        self.owned(Op::ScaleBy(x, s), "scale_by", out, shape, rg)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.rsub(1.0, x)
    }

    /// `c - x`
    pub fn rsub(&mut self, c: f64, x: Var) -> Result<Var> {
        self.map(Op::RSub(x), "rsub", x, |v| c - v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Exp(x), "exp", x, f64::exp)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Relu(x), "relu", x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Sigmoid(x), "sigmoid", x, sigmoid)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.owned(Op::SoftmaxRows(x), "softmax_rows", out, shape, rg)
    }

    /// Picks `idx[r]` columns out of row `r`, giving `[rows, k]`.
    pub fn gather_cols(&mut self, x: Var, idx: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (m, n) = self.dims(x);
        let k = idx.first().map_or(0, |r| r.len());
        if idx.len() != m || idx.iter().any(|r| r.len() != k || r.iter().any(|&c| c >= n)) {
            return Err(Error::shape("gather_cols", format!("index table does not fit [{m},{n}]")));
        }
        let xv = self.value(x);
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .flat_map(|(r, cols)| cols.iter().map(move |&c| xv[r * n + c]))
            .collect();
        let rg = self.rg(x);
        self.owned(Op::Gather(x, idx), "gather_cols", out, vec![m, k], rg)
    }

    /// `out[i] = Σ_t w[i,t] · x[idx[i][t]]` for weights `[n,k]` and features `[n,d]`.
    pub fn sparse_aggregate(&mut self, w: Var, x: Var, idx: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (n, k) = self.dims(w);
        let (nx, d) = self.dims(x);
        if idx.len() != n || idx.iter().any(|r| r.len() != k || r.iter().any(|&c| c >= nx)) {
            return Err(Error::shape("sparse_aggregate", format!("weights [{n},{k}], features [{nx},{d}]")));
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let orow = &mut out[i * d..(i + 1) * d];
            for (t, &j) in idx[i].iter().enumerate() {
                let a = wv[i * k + t];
                for (o, &xx) in orow.iter_mut().zip(&xv[j * d..(j + 1) * d]) {
                    *o += a * xx;
                }
            }
        }
        let rg = self.rg(w) || self.rg(x);
        self.owned(Op::SparseAggregate(w, x, idx), "sparse_aggregate", out, vec![n, d], rg)
    }

    /// Divides each row by `Σ|x| + eps`.
    pub fn l1_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let s: f64 = row.iter().map(|v| v.abs()).sum::<f64>() + eps;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.owned(Op::L1NormRows(x, eps), "l1_normalize_rows", out, shape, rg)
    }

    /// Rows scaled to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Invalid(format!("l2_normalize_rows: row {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.owned(Op::L2NormRows(x), "l2_normalize_rows", out, shape, rg)
    }

    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.owned(Op::SumSq(x), "sum_sq", vec![s], vec![1], rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.owned(Op::Sum(x), "sum", vec![s], vec![1], rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.owned(Op::Mean(x), "mean", vec![s], vec![1], rg)
    }

    /// Mean over axis 0: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        self.owned(Op::MeanRows(x), "mean_rows", out, vec![1, n], rg)
    }

    /// Cosine similarity of matching rows: `[b,d] x [b,d] -> [b]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (m, n) = self.dims(a);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let (x, y) = (&av[r * n..(r + 1) * n], &bv[r * n..(r + 1) * n]);
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::Invalid(format!("cosine_rows: zero-norm vector in row {r}")));
            }
            out.push(dot(x, y) / (nx * ny));
        }
        let rg = self.rg(a) || self.rg(b);
        self.owned(Op::CosineRows(a, b), "cosine_rows", out, vec![m], rg)
    }

    /// `||a - b||_F^2`
    pub fn frob_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("frob_sq_diff", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.owned(Op::FrobSqDiff(a, b), "frob_sq_diff", vec![s], vec![1], rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", format!("width {c} vs {n}")));
            }
            out.extend_from_slice(self.value(p));
            m += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.owned(Op::ConcatRows(parts.to_vec()), "concat_rows", out, vec![m, n], rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.owned(Op::ConcatCols(parts.to_vec()), "concat_cols", out, vec![m, n], rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let out = self.value(x)[start * n..end * n].to_vec();
        let rg = self.rg(x);
        self.owned(Op::SliceRows(x, start), "slice_rows", out, vec![end - start, n], rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} cols")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        self.owned(Op::SliceCols(x, start), "slice_cols", out, vec![m, end - start], rg)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm_rows", format!("width {n}, gamma {:?}", self.shape(gamma))));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mu) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.owned(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm_rows",
            out,
            shape,
            rg,
        )
    }

    /// Forward value unchanged; no gradient flows back through the result.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.owned(Op::StopGrad, "stop_grad", out, shape, false)
    }

    /// Inverted dropout. With `rng = None` (eval mode) this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Invalid(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.owned(Op::Dropout(x, mask), "dropout", out, shape, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id || loss.idx as usize >= self.nodes.len() {
            return Err(Error::Invalid("backward: loss is not on this tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        if !self.rg(loss) {
            return Err(Error::Invalid("backward: loss is detached from every trainable leaf".into()));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep with explicit output adjoints (vector-Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0usize;
        for (v, g) in seeds {
            if v.graph != self.id || v.idx as usize >= self.nodes.len() {
                return Err(Error::Invalid("backward: seed is not on this tape".into()));
            }
            if g.len() != self.node(*v).value.len() {
                return Err(Error::shape("backward", "seed length differs from node size"));
            }
            accumulate(&mut grads[v.idx as usize], g);
            start = start.max(v.idx as usize + 1);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut by_key = HashMap::new();
        for (&key, &v) in &self.leaf_keys {
            if self.rg(v) {
                let g = grads[v.idx as usize].clone().unwrap_or_else(|| vec![0.0; self.node(v).value.len()]);
                by_key.insert(key, g);
            }
        }
        Ok(Gradients {
            graph: self.id,
            nodes: grads,
            by_key,
        })
    }

    fn want(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn propagate(&self, node: &Node<'p>, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul(a, b) => {
                let (_, k) = self.dims(*a);
                if self.want(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(gy, self.value(*b), &mut ga, m, n, k);
                    acc(grads, *a, &ga);
                }
                if self.want(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(self.value(*a), gy, &mut gb, m, k, n);
                    acc(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] = gy[i * n + j];
                    }
                }
                acc(grads, *a, &ga);
            }
            Op::Add(a, b) => {
                if self.want(*a) {
                    acc(grads, *a, gy);
                }
                if self.want(*b) {
                    acc(grads, *b, gy);
                }
            }
            Op::Sub(a, b) => {
                if self.want(*a) {
                    acc(grads, *a, gy);
                }
                if self.want(*b) {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.want(*a) {
                    let g: Vec<f64> = gy.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    acc(grads, *a, &g);
                }
                if self.want(*b) {
                    let g: Vec<f64> = gy.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    acc(grads, *b, &g);
                }
            }
            Op::AddRow(x, b) => {
                if self.want(*x) {
                    acc(grads, *x, gy);
                }
                if self.want(*b) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (o, g) in gb.iter_mut().zip(&gy[r * n..(r + 1) * n]) {
                            *o += g;
                        }
                    }
                    acc(grads, *b, &gb);
                }
            }
            Op::Scale(x, c) => {
                let g: Vec<f64> = gy.iter().map(|g| g * c).collect();
                acc(grads, *x, &g);
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s)[0];
                if self.want(*x) {
                    let g: Vec<f64> = gy.iter().map(|g| g * c).collect();
                    acc(grads, *x, &g);
                }
                if self.want(*s) {
                    let gs = dot(gy, self.value(*x));
                    acc(grads, *s, &[gs]);
                }
            }
            Op::RSub(x) => {
                let g: Vec<f64> = gy.iter().map(|g| -g).collect();
                acc(grads, *x, &g);
            }
            Op::Exp(x) => {
                let g: Vec<f64> = gy.iter().zip(node.value.iter()).map(|(g, y)| g * y).collect();
                acc(grads, *x, &g);
            }
            Op::Relu(x) => {
                let g: Vec<f64> = gy
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, &g);
            }
            Op::Sigmoid(x) => {
                let g: Vec<f64> = gy.iter().zip(node.value.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *x, &g);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gy[r * n..(r + 1) * n]);
                    let s = dot(yr, gr);
                    for c in 0..n {
                        g[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                acc(grads, *x, &g);
            }
            Op::Gather(x, idx) => {
                let (xm, xn) = self.dims(*x);
                let mut g = vec![0.0; xm * xn];
                for (r, cols) in idx.iter().enumerate() {
                    for (t, &c) in cols.iter().enumerate() {
                        g[r * xn + c] += gy[r * n + t];
                    }
                }
                acc(grads, *x, &g);
            }
            Op::SparseAggregate(w, x, idx) => {
                let (rows, k) = self.dims(*w);
                let (nx, d) = self.dims(*x);
                let (wv, xv) = (self.value(*w), self.value(*x));
                if self.want(*w) {
                    let mut gw = vec![0.0; rows * k];
                    for i in 0..rows {
                        for (t, &j) in idx[i].iter().enumerate() {
                            gw[i * k + t] = dot(&gy[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                        }
                    }
                    acc(grads, *w, &gw);
                }
                if self.want(*x) {
                    let mut gx = vec![0.0; nx * d];
                    for i in 0..rows {
                        for (t, &j) in idx[i].iter().enumerate() {
                            let a = wv[i * k + t];
                            for (o, g) in gx[j * d..(j + 1) * d].iter_mut().zip(&gy[i * d..(i + 1) * d]) {
                                *o += a * g;
                            }
                        }
                    }
                    acc(grads, *x, &gx);
                }
            }
            Op::L1NormRows(x, eps) => {
                let xv = self.value(*x);
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &gy[r * n..(r + 1) * n];
                    let s = row.iter().map(|v| v.abs()).sum::<f64>() + eps;
                    let cross = dot(gr, row) / (s * s);
                    for c in 0..n {
                        g[r * n + c] = gr[c] / s - row[c].signum() * cross;
                    }
                }
                acc(grads, *x, &g);
            }
            Op::L2NormRows(x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    let nr = norm(&xv[r * n..(r + 1) * n]);
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gy[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for c in 0..n {
                        g[r * n + c] = (gr[c] - yr[c] * s) / nr;
                    }
                }
                acc(grads, *x, &g);
            }
            Op::SumSq(x) => {
                let g: Vec<f64> = self.value(*x).iter().map(|v| 2.0 * v * gy[0]).collect();
                acc(grads, *x, &g);
            }
            Op::Sum(x) => {
                let g = vec![gy[0]; self.value(*x).len()];
                acc(grads, *x, &g);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let g = vec![gy[0] / len as f64; len];
                acc(grads, *x, &g);
            }
            Op::MeanRows(x) => {
                let (xm, xn) = self.dims(*x);
                let mut g = vec![0.0; xm * xn];
                for r in 0..xm {
                    for c in 0..xn {
                        g[r * xn + c] = gy[c] / xm as f64;
                    }
                }
                acc(grads, *x, &g);
            }
            Op::CosineRows(a, b) => {
                let (rows, d) = self.dims(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; rows * d];
                let mut gb = vec![0.0; rows * d];
                for r in 0..rows {
                    let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let (nx, ny) = (norm(x), norm(y));
                    let c = node.value[r];
                    for j in 0..d {
                        ga[r * d + j] = gy[r] * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        gb[r * d + j] = gy[r] * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                if self.want(*a) {
                    acc(grads, *a, &ga);
                }
                if self.want(*b) {
                    acc(grads, *b, &gb);
                }
            }
            Op::FrobSqDiff(a, b) => {
                let diff: Vec<f64> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| 2.0 * (x - y) * gy[0])
                    .collect();
                if self.want(*a) {
                    acc(grads, *a, &diff);
                }
                if self.want(*b) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.want(p) {
                        acc(grads, p, &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let (pm, pn) = self.dims(p);
                    if self.want(p) {
                        let mut g = Vec::with_capacity(pm * pn);
                        for r in 0..pm {
                            g.extend_from_slice(&gy[r * n + col..r * n + col + pn]);
                        }
                        acc(grads, p, &g);
                    }
                    col += pn;
                }
            }
            Op::SliceRows(x, start) => {
                let (xm, xn) = self.dims(*x);
                let mut g = vec![0.0; xm * xn];
                g[start * xn..start * xn + m * n].copy_from_slice(gy);
                acc(grads, *x, &g);
            }
            Op::SliceCols(x, start) => {
                let (xm, xn) = self.dims(*x);
                let mut g = vec![0.0; xm * xn];
                for r in 0..xm {
                    g[r * xn + start..r * xn + start + n].copy_from_slice(&gy[r * n..(r + 1) * n]);
                }
                acc(grads, *x, &g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.want(*gamma) || self.want(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += gy[r * n + c] * xhat[r * n + c];
                            gb[c] += gy[r * n + c];
                        }
                    }
                    if self.want(*gamma) {
                        acc(grads, *gamma, &gg);
                    }
                    if self.want(*beta) {
                        acc(grads, *beta, &gb);
                    }
                }
                if self.want(*x) {
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|c| gy[r * n + c] * gv[c]).collect();
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for c in 0..n {
                            gx[r * n + c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(grads, *x, &gx);
                }
            }
            Op::Dropout(x, mask) => {
                let g: Vec<f64> = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(grads, *x, &g);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g.to_vec()),
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    accumulate(&mut grads[v.idx as usize], g);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    graph: u32,
    nodes: Vec<Option<Vec<f64>>>,
    by_key: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a parameter registered with [`Graph::param`]. `None` if
    /// the tensor never entered the tape or is not trainable.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_key.get(&key_of(t)).map(Vec::as_slice)
    }

    /// Adjoint of any node; `None` when nothing flowed into it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.nodes.get(v.idx as usize).and_then(|g| g.as_deref())
    }

    pub(crate) fn take_by_key(self) -> HashMap<usize, Vec<f64>> {
        self.by_key
    }
}

pub(crate) fn tensor_key(t: &Tensor) -> usize {
    key_of(t)
}
