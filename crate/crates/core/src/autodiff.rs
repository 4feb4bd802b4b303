//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are stored in
//! creation order, so every node's inputs precede it and the backward sweep is a
//! single pass in reverse append order. Parameters are borrowed rather than
//! copied; the tape remembers which parameter tensor each leaf came from so that
//! gradients can be routed back into the owning model afterwards.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use smallvec::{smallvec, SmallVec};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
        cols: usize,
    },
    AddAtRow {
        a: Var,
        row: usize,
        v: Var,
        cols: usize,
    },
    Scale {
        a: Var,
        c: T,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        a: Var,
        cols: usize,
    },
    LogSoftmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
        width: usize,
        cols: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
}

/// Node shapes stay inline; the tape creates thousands of small nodes.
type Dims = SmallVec<[usize; 4]>;

#[derive(Debug)]
struct Node<'p, T: Clone> {
    shape: Dims,
    value: Cow<'p, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation log for one forward pass.
#[derive(Debug)]
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: BTreeMap<usize, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn addr<T>(t: &Tensor<T>) -> usize {
    t as *const Tensor<T> as usize
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for p in p..k {
            axpy(arow[p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// `y += alpha · x`
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let coef = T::of(0.044715);
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = s * (x + coef * x * x * x);
    // (1 + tanh u) / 2 = sigmoid(2u); one exp is much cheaper than libm tanh.
    let sig = T::one() / (T::one() + (-(inner + inner)).exp());
    let y = x * sig;
    let dinner = s * (T::one() + T::of(3.0) * coef * x * x);
    let dy = sig + (x + x) * sig * (T::one() - sig) * dinner;
    (y, dy)
}

/// Tanh-approximation GELU of a single value.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Dims, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a model parameter, borrowing its storage. Registering the same
    /// tensor twice returns the same node, so gradients from every use add up.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        let key = addr(t);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            shape: Dims::from_slice(t.shape()),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Adds an owned leaf. Its gradient is reported when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = Dims::from_slice(t.shape());
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, TensorError> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.leaf(Tensor::zeros(shape))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].shape.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "{op} expects a 2-D tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(smallvec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.require_2d("matmul_nt", a)?;
        let (n, k2) = self.require_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut s = T::zero();
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.push(
            smallvec![m, n],
            out,
            Op::MatMulNt { a, b, m, k, n },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.dims(a), out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.dims(a), out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.dims(a), out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, cols) = self.rows_cols(a);
        if self.value(bias).len() != cols {
            return Err(dim_err("add_row", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        Ok(self.push(self.dims(a), out, Op::AddRow { a, bias, cols }, &[a, bias]))
    }

    /// Adds the vector `v` into row `row` of `a`, leaving other rows untouched.
    pub fn add_at_row(&mut self, a: Var, row: usize, v: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.rows_cols(a);
        if row >= rows {
            return Err(TensorError::Index {
                op: "add_at_row",
                index: row,
                extent: rows,
            });
        }
        if self.value(v).len() != cols {
            return Err(dim_err("add_at_row", self.shape(a), self.shape(v)));
        }
        let mut out = self.value(a).to_vec();
        for (o, &x) in out[row * cols..(row + 1) * cols]
            .iter_mut()
            .zip(self.value(v))
        {
            *o += x;
        }
        Ok(self.push(self.dims(a), out, Op::AddAtRow { a, row, v, cols }, &[a, v]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.dims(a), out, Op::Scale { a, c }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        self.push(self.dims(a), out, Op::Gelu { a }, &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.dims(a);
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "softmax",
                index: axis,
                extent: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(x[at(l)]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Softmax over the last axis restricted to the columns where `keep` is
    /// true. Excluded columns receive weight exactly zero.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let (_, cols) = self.rows_cols(a);
        if keep.len() != cols {
            return Err(dim_err("masked_softmax", self.shape(a), &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::Contract(
                "every key is masked; attention cannot be normalized".into(),
            ));
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let mut mx = T::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if keep[j] {
                    mx = mx.max(v);
                }
            }
            let mut sum = T::zero();
            for j in 0..cols {
                if keep[j] {
                    let e = (xr[j] - mx).exp();
                    or[j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                if keep[j] {
                    or[j] /= sum;
                }
            }
        }
        Ok(self.push(self.dims(a), out, Op::MaskedSoftmax { a, cols }, &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = self.rows_cols(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(self.dims(a), out, Op::LogSoftmax { a, cols }, &[a])
    }

    /// Normalizes each row to zero mean and unit (biased) variance, then applies
    /// `gamma · x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, TensorError> {
        let (_, cols) = self.rows_cols(x);
        if self.value(gamma).len() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).len() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(beta)));
        }
        let n = T::of(cols as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / cols);
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.chunks(cols).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = g[j] * h + b[j];
            }
        }
        let shape = self.dims(x);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of a 2-D `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.require_2d("gather", table)?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather needs at least one id".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(
            smallvec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
            &[table],
        ))
    }

    /// Stacks 2-D parts with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = self.rows_cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(
            smallvec![rows, cols],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.rows_cols(a);
        if len == 0 || start + len > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: rows,
            });
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            smallvec![len, cols],
            out,
            Op::SliceRows { a, start, cols },
            &[a],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.rows_cols(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            smallvec![rows, total],
            out,
            Op::ConcatCols {
                parts: widths,
                rows,
            },
            parts,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.rows_cols(a);
        if width == 0 || start + width > cols {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + width,
                extent: cols,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + width]);
        }
        Ok(self.push(
            smallvec![rows, width],
            out,
            Op::SliceCols {
                a,
                start,
                width,
                cols,
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(smallvec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(smallvec![1], vec![s], Op::Mean { a }, &[a])
    }

    /// `sum(a ⊙ b)`
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[batch × classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (batch, classes) = self.require_2d("cross_entropy", logits)?;
        if labels.len() != batch {
            return Err(dim_err(
                "cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: label,
                    extent: classes,
                });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[label];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - mx).exp() / sum;
            }
        }
        let loss = total / T::of(batch as f64);
        Ok(self.push(
            smallvec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Gathers individual elements by flat index into a 1-D tensor.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= av.len() {
                return Err(TensorError::Index {
                    op: "pick",
                    index: i,
                    extent: av.len(),
                });
            }
            out.push(av[i]);
        }
        if out.is_empty() {
            return Err(TensorError::Contract(
                "pick needs at least one index".into(),
            ));
        }
        Ok(self.push(
            smallvec![flat.len()],
            out,
            Op::Pick {
                a,
                idx: flat.to_vec(),
            },
            &[a],
        ))
    }

    /// Inverted dropout. A rate of zero returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(self.push(self.dims(a), out, Op::Dropout { a, mask }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(dim_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(Dims::from_slice(shape), out, Op::Reshape { a }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.require_2d("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        Ok(self.push(
            smallvec![cols, rows],
            out,
            Op::Transpose { a, rows, cols },
            &[a],
        ))
    }

    /// Reverse sweep from a one-element `loss`. A tape can be swept once; a
    /// second call is rejected rather than silently doubling gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad {
                    leaves.insert(Var(id), g);
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len_of = |v: Var| nodes[v.0].value.len();
        // accumulate into slot v, allocating zeros on first touch
        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, a, m * k);
                    for (grow, garow) in g.chunks_exact(n).zip(ga.chunks_exact_mut(k)) {
                        for (gap, brow) in garow.iter_mut().zip(bv.chunks_exact(n)) {
                            *gap += dot_slices(grow, brow);
                        }
                    }
                }
                if wants(b) {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, b, k * n);
                    for (arow, grow) in av.chunks_exact(k).zip(g.chunks_exact(n)) {
                        for (&aip, gbrow) in arow.iter().zip(gb.chunks_exact_mut(n)) {
                            if aip != T::zero() {
                                axpy(aip, grow, gbrow);
                            }
                        }
                    }
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if wants(a) {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, a, m * k);
                    gemm_acc(g, bv, ga, m, n, k);
                }
                if wants(b) {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, b, n * k);
                    for (grow, arow) in g.chunks_exact(n).zip(av.chunks_exact(k)) {
                        for (&gij, gbrow) in grow.iter().zip(gb.chunks_exact_mut(k)) {
                            if gij != T::zero() {
                                axpy(gij, arow, gbrow);
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, v, g.len())
                            .iter_mut()
                            .zip(g)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    slot(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
                if wants(b) {
                    slot(grads, b, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x -= y);
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddRow { a, bias, cols } => {
                if wants(a) {
                    slot(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
                if wants(bias) {
                    let gb = slot(grads, bias, cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::AddAtRow { a, row, v, cols } => {
                if wants(a) {
                    slot(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
                if wants(v) {
                    let gv = slot(grads, v, cols);
                    gv.iter_mut()
                        .zip(&g[row * cols..(row + 1) * cols])
                        .for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    slot(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += c * y);
                }
            }
            &Op::Gelu { a } => {
                if wants(a) {
                    let av = &nodes[a.0].value;
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_parts(av[i]).1;
                    }
                }
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if wants(a) {
                    let y = &nodes[id].value;
                    let ga = slot(grads, a, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dotp: T = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += y[at(l)] * (g[at(l)] - dotp);
                            }
                        }
                    }
                }
            }
            &Op::MaskedSoftmax { a, cols } => {
                if wants(a) {
                    let y = &nodes[id].value;
                    let ga = slot(grads, a, g.len());
                    for r in 0..g.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dotp: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a, cols } => {
                if wants(a) {
                    let y = &nodes[id].value;
                    let ga = slot(grads, a, g.len());
                    for r in 0..g.len() / cols {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - y[r * cols + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                let gv = &nodes[gamma.0].value;
                if wants(x) {
                    let n = T::of(cols as f64);
                    let gx = slot(grads, x, g.len());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let base = r * cols;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..cols {
                            let d = g[base + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[base + j];
                        }
                        for j in 0..cols {
                            let d = g[base + j] * gv[j];
                            gx[base + j] += is / n * (n * d - sum_d - xhat[base + j] * sum_dx);
                        }
                    }
                }
                if wants(gamma) {
                    let gg = slot(grads, gamma, cols);
                    for (i, &gi) in g.iter().enumerate() {
                        gg[i % cols] += gi * xhat[i];
                    }
                }
                if wants(beta) {
                    let gb = slot(grads, beta, cols);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % cols] += gi;
                    }
                }
            }
            Op::Gather { table, ids, cols } => {
                let (table, cols) = (*table, *cols);
                if wants(table) {
                    let gt = slot(grads, table, len_of(table));
                    for (r, &idx) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[idx * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if wants(p) {
                        slot(grads, p, n)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(x, &y)| *x += y);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { a, start, cols } => {
                if wants(a) {
                    let ga = slot(grads, a, len_of(a));
                    ga[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, c) in parts {
                    if wants(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..*rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceCols {
                a,
                start,
                width,
                cols,
            } => {
                if wants(a) {
                    let ga = slot(grads, a, len_of(a));
                    for r in 0..g.len() / width {
                        for j in 0..width {
                            ga[r * cols + start + j] += g[r * width + j];
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    let ga = slot(grads, a, len_of(a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean { a } => {
                if wants(a) {
                    let n = len_of(a);
                    let d = g[0] / T::of(n as f64);
                    slot(grads, a, n).iter_mut().for_each(|x| *x += d);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if wants(logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / T::of(batch as f64);
                    let gl = slot(grads, logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                let a = *a;
                if wants(a) {
                    let ga = slot(grads, a, len_of(a));
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i] += g[k];
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let a = *a;
                if wants(a) {
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            &Op::Reshape { a } => {
                if wants(a) {
                    slot(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if wants(a) {
                    let ga = slot(grads, a, g.len());
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Vec<T>>,
    params: BTreeMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    /// Gradient for a parameter tensor that was registered with [`Tape::param`].
    /// Lookup is by identity, so pass the same tensor the forward pass borrowed.
    pub fn for_param(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&addr(t)).and_then(|v| self.wrt(*v))
    }
}
