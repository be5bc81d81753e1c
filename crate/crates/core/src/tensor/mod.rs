//! Dense two-dimensional tensors with tape-based reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients for every node that contributed to a scalar loss.
//!
//! ```
//! use loggraph_core::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

pub mod gradcheck;
mod params;

pub use params::{Checkpoint, ParamEntry, ParamId, ParamStore, CHECKPOINT_VERSION};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major matrix. Vectors are `1 × n`, scalars `1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row(data: Vec<T>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which row of the source an index in [`Tape::pair_gather`] reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatherRow {
    /// `out[i][j] = src[i][idx[i][j]]`
    Query,
    /// `out[i][j] = src[j][idx[i][j]]`
    Key,
    /// `out[i][j] = src[0][idx[i][j]]`
    Shared,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumRows(Var),
    SumAll(Var),
    MaxRows(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    Gelu(Var),
    Dropout(Var, Vec<T>),
    Lookup(Var, Vec<usize>),
    PairGather(Var, Arc<Vec<usize>>, GatherRow),
    BucketScatter(Var, Arc<Vec<usize>>),
    CrossEntropy(Var, Vec<usize>, Vec<T>),
}

fn op_name<T: std::fmt::Debug>(op: &Op<T>) -> String {
    let s = format!("{op:?}");
    s.split('(').next().unwrap_or_default().to_string()
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Arc<Vec<T>>,
    op: Op<T>,
}

/// Counter-based dropout stream: mask `k` depends only on `(seed, k)`.
#[derive(Debug, Clone)]
pub struct DropoutRng {
    seed: u64,
    counter: u64,
}

impl DropoutRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }
}

/// Recording of forward operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Cleared once a non-finite leaf is recorded; forward ops are only
    /// checked for finiteness while it holds.
    finite_leaves: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> ! {
    panic!("{op}: incompatible shapes {a:?} and {b:?}")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            finite_leaves: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        if cfg!(debug_assertions) {
            if matches!(op, Op::Leaf) {
                self.finite_leaves &= value.iter().all(|x| x.is_finite());
            } else if self.finite_leaves {
                assert!(
                    value.iter().all(|x| x.is_finite()),
                    "non-finite value produced by {}",
                    op_name(&op)
                );
            }
        }
        self.nodes.push(Node {
            rows,
            cols,
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t.rows, t.cols, t.data, Op::Leaf)
    }

    /// Leaf sharing storage with a parameter; no copy is made.
    pub fn leaf_shared(&mut self, rows: usize, cols: usize, data: Arc<Vec<T>>) -> Var {
        assert_eq!(data.len(), rows * cols, "shared leaf has wrong length");
        if cfg!(debug_assertions) {
            self.finite_leaves &= data.iter().all(|x| x.is_finite());
        }
        self.nodes.push(Node {
            rows,
            cols,
            value: data,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.rows, n.cols, n.value.to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            shape_err("matmul", [m, k], [k2, n]);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            T::zero(),
            &mut out,
        );
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let ([m, k], [n, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            shape_err("matmul_t", [m, k], [n, k2]);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k, 1),
            self.value(b),
            (1, k),
            T::zero(),
            &mut out,
        );
        self.push(m, n, out, Op::MatMulT(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            shape_err(name, sa, sb);
        }
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, "add", |x, y| x + y);
        let [r, c] = self.shape(a);
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, "sub", |x, y| x - y);
        let [r, c] = self.shape(a);
        self.push(r, c, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, "mul", |x, y| x * y);
        let [r, c] = self.shape(a);
        self.push(r, c, out, Op::Mul(a, b))
    }

    fn check_row_vec(&self, name: &str, a: Var, b: Var) -> [usize; 2] {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb != [1, sa[1]] {
            shape_err(name, sa, sb);
        }
        sa
    }

    /// `a[m,n] + b[1,n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let [r, c] = self.check_row_vec("add_row", a, b);
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        self.push(r, c, out, Op::AddRow(a, b))
    }

    /// `a[m,n] * b[1,n]`, broadcasting `b` over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let [r, c] = self.check_row_vec("mul_row", a, b);
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
            .collect();
        self.push(r, c, out, Op::MulRow(a, b))
    }

    /// `a[m,n] * w[m,1]`: scales row `i` of `a` by `w[i]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sw != [sa[0], 1] {
            shape_err("mul_col", sa, sw);
        }
        let [r, c] = sa;
        let wv = self.value(w);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .zip(wv)
            .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
            .collect();
        self.push(r, c, out, Op::MulCol(a, w))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let [r, c] = self.shape(a);
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0])[0];
        for &p in parts {
            if self.shape(p)[0] != rows {
                shape_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.shape(parts[0])[1];
        for &p in parts {
            if self.shape(p)[1] != cols {
                shape_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let [r, c] = self.shape(a);
        assert!(start + width <= c, "slice_cols: {start}+{width} exceeds {c} columns");
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        self.push(r, width, out, Op::SliceCols(a, start))
    }

    /// Column sums, `[m,n] -> [1,n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let [_, c] = self.shape(a);
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        self.push(1, c, out, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    /// Column maxima, `[m,n] -> [1,n]`. The gradient flows to the first maximal row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        assert!(r > 0, "max_rows: empty input");
        let v = self.value(a);
        let mut arg = vec![0usize; c];
        let mut out = v[..c].to_vec();
        for i in 1..r {
            for j in 0..c {
                if v[i * c + j] > out[j] {
                    out[j] = v[i * c + j];
                    arg[j] = i;
                }
            }
        }
        self.push(1, c, out, Op::MaxRows(a, arg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(r, c, out, Op::Softmax(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::from_usize(c).unwrap();
        let mut out = self.value(a).to_vec();
        let mut rstd = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
            rstd.push(s);
        }
        self.push(r, c, out, Op::LayerNorm(a, rstd))
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        let [r, c] = self.shape(a);
        self.push(r, c, out, Op::Gelu(a))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut DropoutRng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        if p == 0.0 {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mut stream = rng.next_rng();
        let len = self.value(a).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if stream.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let [r, c] = self.shape(a);
        self.push(r, c, out, Op::Dropout(a, mask))
    }

    /// Gathers rows of `table` by index, `[rows, d] -> [idx.len(), d]`.
    pub fn lookup(&mut self, table: Var, idx: &[usize]) -> Var {
        let [r, d] = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < r, "lookup: index {i} out of range for table with {r} rows");
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(idx.len(), d, out, Op::Lookup(table, idx.to_vec()))
    }

    /// Builds an `n × n` matrix whose entry `(i, j)` is column `idx[i*n+j]`
    /// of a row of `src` chosen by `mode`.
    pub fn pair_gather(&mut self, src: Var, idx: Arc<Vec<usize>>, mode: GatherRow) -> Var {
        let [r, c] = self.shape(src);
        let n = (idx.len() as f64).sqrt() as usize;
        assert_eq!(n * n, idx.len(), "pair_gather: index is not square");
        let expect_rows = if mode == GatherRow::Shared { 1 } else { n };
        if r != expect_rows {
            shape_err("pair_gather", [r, c], [n, n]);
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let b = idx[i * n + j];
                assert!(b < c, "pair_gather: bucket {b} out of range {c}");
                let row = match mode {
                    GatherRow::Query => i,
                    GatherRow::Key => j,
                    GatherRow::Shared => 0,
                };
                out.push(sv[row * c + b]);
            }
        }
        self.push(n, n, out, Op::PairGather(src, idx, mode))
    }

    /// `out[i][b] = Σ_{j : idx[i*n+j] = b} a[i][j]` with `buckets` columns.
    pub fn bucket_scatter(&mut self, a: Var, idx: Arc<Vec<usize>>, buckets: usize) -> Var {
        let [n, n2] = self.shape(a);
        if n != n2 || idx.len() != n * n {
            shape_err("bucket_scatter", [n, n2], [idx.len(), buckets]);
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); n * buckets];
        for i in 0..n {
            for j in 0..n {
                let b = idx[i * n + j];
                assert!(b < buckets, "bucket_scatter: bucket {b} out of range {buckets}");
                out[i * buckets + b] += av[i * n + j];
            }
        }
        self.push(n, buckets, out, Op::BucketScatter(a, idx))
    }

    /// Mean cross-entropy of row-wise logits against class labels, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let [r, c] = self.shape(logits);
        assert_eq!(r, labels.len(), "cross_entropy: {r} rows but {} labels", labels.len());
        assert!(r > 0, "cross_entropy: empty batch");
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = T::zero();
        for (row, &y) in lv.chunks(c).zip(labels) {
            assert!(y < c, "cross_entropy: label {y} out of range {c}");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        loss /= T::from_usize(r).unwrap();
        self.push(1, 1, vec![loss], Op::CrossEntropy(logits, labels.to_vec(), probs))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// # Panics
    ///
    /// If `loss` is not `1 × 1`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), [1, 1], "backward requires a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    T::gemm(m, n, k, T::one(), g, (n, 1), bv, (1, n), T::one(), ga)
                });
                acc(*b, &mut |gb| {
                    T::gemm(k, m, n, T::one(), av, (1, k), g, (n, 1), T::one(), gb)
                });
            }
            Op::MatMulT(a, b) => {
                // out = a · bᵀ: da = g · b, db = gᵀ · a
                let [m, k] = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    T::gemm(m, n, k, T::one(), g, (n, 1), bv, (k, 1), T::one(), ga)
                });
                acc(*b, &mut |gb| {
                    T::gemm(n, m, k, T::one(), g, (1, n), av, (k, 1), T::one(), gb)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *x += gy * aa;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for (grow, gyrow) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((x, &gy), &bb) in grow.iter_mut().zip(gyrow).zip(bv.iter()) {
                            *x += gy * bb;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (arow, gyrow) in av.chunks(cols).zip(g.chunks(cols)) {
                        for ((x, &gy), &aa) in gb.iter_mut().zip(gyrow).zip(arow) {
                            *x += gy * aa;
                        }
                    }
                });
            }
            Op::MulCol(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                acc(*a, &mut |ga| {
                    for ((grow, gyrow), &s) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(wv.iter()) {
                        grow.iter_mut().zip(gyrow).for_each(|(x, &gy)| *x += gy * s);
                    }
                });
                acc(*w, &mut |gw| {
                    for ((x, arow), gyrow) in gw.iter_mut().zip(av.chunks(cols)).zip(g.chunks(cols)) {
                        *x += arow.iter().zip(gyrow).map(|(&p, &q)| p * q).sum::<T>();
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    acc(p, &mut |gp| {
                        for (grow, gyrow) in gp.chunks_mut(pc).zip(g.chunks(cols)) {
                            grow.iter_mut()
                                .zip(&gyrow[offset..offset + pc])
                                .for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, &y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a)[1];
                acc(*a, &mut |ga| {
                    for (grow, gyrow) in ga.chunks_mut(ac).zip(g.chunks(cols)) {
                        grow[*start..*start + cols]
                            .iter_mut()
                            .zip(gyrow)
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::SumRows(a) => {
                acc(*a, &mut |ga| {
                    for grow in ga.chunks_mut(cols) {
                        grow.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::SumAll(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::MaxRows(a, arg) => {
                acc(*a, &mut |ga| {
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * cols + j] += g[j];
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((grow, yrow), gyrow) in ga.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: T = yrow.iter().zip(gyrow).map(|(&p, &q)| p * q).sum();
                        for ((x, &yy), &gy) in grow.iter_mut().zip(yrow).zip(gyrow) {
                            *x += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a, rstd) => {
                let xhat = &node.value;
                let n = T::from_usize(cols).unwrap();
                acc(*a, &mut |ga| {
                    for (((grow, xrow), gyrow), &s) in ga
                        .chunks_mut(cols)
                        .zip(xhat.chunks(cols))
                        .zip(g.chunks(cols))
                        .zip(rstd.iter())
                    {
                        let mean_g = gyrow.iter().copied().sum::<T>() / n;
                        let mean_gx = gyrow.iter().zip(xrow).map(|(&p, &q)| p * q).sum::<T>() / n;
                        for ((x, &xh), &gy) in grow.iter_mut().zip(xrow).zip(gyrow) {
                            *x += s * (gy - mean_g - xh * mean_gx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
                let half = T::lit(0.5);
                acc(*a, &mut |ga| {
                    for ((x, &v), &gy) in ga.iter_mut().zip(av.iter()).zip(g) {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        *x += gy * (cdf + v * pdf);
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |ga| {
                    for ((x, &m), &gy) in ga.iter_mut().zip(mask).zip(g) {
                        *x += gy * m;
                    }
                });
            }
            Op::Lookup(table, idx) => {
                acc(*table, &mut |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        gt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::PairGather(src, idx, mode) => {
                let sc = self.shape(*src)[1];
                let n = rows;
                acc(*src, &mut |gs| {
                    for i in 0..n {
                        for j in 0..n {
                            let row = match mode {
                                GatherRow::Query => i,
                                GatherRow::Key => j,
                                GatherRow::Shared => 0,
                            };
                            gs[row * sc + idx[i * n + j]] += g[i * n + j];
                        }
                    }
                });
            }
            Op::BucketScatter(a, idx) => {
                let n = rows;
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..n {
                            ga[i * n + j] += g[i * cols + idx[i * n + j]];
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                acc(*logits, &mut |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == y { T::one() } else { T::zero() };
                            gl[r * c + k] += scale * (probs[r * c + k] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheck};
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        assert_eq!(t.backward(y).get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::row(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_tied_logits_is_ln2() {
        for label in [0, 1] {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::row(vec![0.7, 0.7]));
            let l = t.cross_entropy(x, &[label]);
            assert!((t.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(2, 2, vec![1e4, -1e4, -1e4, 1e4]));
        let l = t.cross_entropy(x, &[1, 1]);
        assert!((t.value(l)[0] - 1e4).abs() < 1e-9);
        let g = t.backward(l);
        assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gelu_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::row(vec![0.0, 1.0]));
        let y = t.gelu(x);
        assert_eq!(t.value(y)[0], 0.0);
        assert!((t.value(y)[1] - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(rand_tensor(&mut rng, 3, 7));
        let y = t.layer_norm(x);
        for row in t.value(y).chunks(7) {
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_is_deterministic_and_scaled() {
        let run = |seed| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(10, 10, vec![1.0; 100]));
            let mut rng = DropoutRng::new(seed);
            let y = t.dropout(x, 0.3, &mut rng);
            t.value(y).to_vec()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert_ne!(a, run(6));
        assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        let dropped = a.iter().filter(|&&v| v == 0.0).count();
        assert!((10..=50).contains(&dropped), "{dropped}");
    }

    #[test]
    fn broadcast_ops_values() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let r = t.leaf(Tensor::row(vec![10.0, 20.0]));
        let w = t.leaf(Tensor::new(2, 1, vec![2.0, 0.0]));
        let s = t.add_row(a, r);
        let m = t.mul_col(a, w);
        let mx = t.max_rows(a);
        let sm = t.sum_rows(a);
        assert_eq!(t.value(s), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(t.value(m), &[2.0, 4.0, 0.0, 0.0]);
        assert_eq!(t.value(mx), &[3.0, 4.0]);
        assert_eq!(t.value(sm), &[4.0, 6.0]);
    }

    #[test]
    fn pair_gather_and_scatter_values() {
        let mut t = Tape::<f64>::new();
        // 2 nodes, 3 buckets
        let src = t.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let idx = Arc::new(vec![0, 1, 2, 0]);
        let q = t.pair_gather(src, idx.clone(), GatherRow::Query);
        let k = t.pair_gather(src, idx.clone(), GatherRow::Key);
        assert_eq!(t.value(q), &[1.0, 2.0, 6.0, 4.0]);
        assert_eq!(t.value(k), &[1.0, 5.0, 3.0, 4.0]);
        let a = t.leaf(Tensor::new(2, 2, vec![0.25, 0.75, 0.5, 0.5]));
        let h = t.bucket_scatter(a, Arc::new(vec![0, 1, 1, 1]), 3);
        assert_eq!(t.value(h), &[0.25, 0.75, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "[2, 3] and [2, 3]")]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        t.matmul(a, a);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        t.backward(a);
    }

    #[test]
    fn f32_matches_f64_forward() {
        let mut t64 = Tape::<f64>::new();
        let mut t32 = Tape::<f32>::new();
        let data = [0.3, -1.2, 2.0, 0.5, 0.1, -0.7];
        let a64 = t64.leaf(Tensor::from_f64(2, 3, &data));
        let a32 = t32.leaf(Tensor::from_f64(2, 3, &data));
        let y64 = t64.softmax(a64);
        let y32 = t32.softmax(a32);
        let y32: Vec<f64> = t32.value(y32).iter().map(|&x| x as f64).collect();
        assert_close(&y32, t64.value(y64), 1e-6);
    }

    /// Every primitive against central differences.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let report = check_gradients(&GradCheck::default(), &mut rng, |_| true);
        for (name, err) in &report {
            assert!(*err <= 1e-6, "{name}: relative error {err:e}");
        }
        assert!(report.len() >= 20);
    }
}
