//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! The tape is eager: every operation computes its value immediately and
//! records enough information to run the chain rule later. Parameters enter
//! the tape as leaves tied to an offset in a flat weight vector, so the
//! gradient returned by [`Graph::backward`] lines up index-for-index with the
//! flat parameter layout the federation layer aggregates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requested before the output node was evaluated")]
    NotEvaluated,
    #[error("parameter slice {offset}+{len} exceeds weight vector of length {total}")]
    ParamRange {
        offset: usize,
        len: usize,
        total: usize,
    },
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Numeric precision used when parameters leave the process (checkpoints,
/// communication accounting). All arithmetic runs in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    /// Rounds a value through this precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows of a tensor viewed as a matrix: all leading dims are folded.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param {
        offset: usize,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    scale: f64,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// GELU tanh-approximation constant sqrt(2/pi).
pub const GELU_K: f64 = 0.797_884_560_802_865_4;
/// GELU tanh-approximation cubic coefficient.
pub const GELU_C: f64 = 0.044_715;
/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [n, k] * b[m, k]^T`.
fn matmul_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    matmul_raw(a, &transpose_raw(b, m, k), n, k, m)
}

/// `a[n, k]^T * b[n, m]`.
fn matmul_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Eager reverse-mode tape over a flat parameter vector of fixed length.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Graph {
    pub fn new(n_params: usize) -> Self {
        Graph {
            nodes: Vec::new(),
            n_params,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Input, t, "input")
    }

    /// Trainable leaf reading `shape` values from `weights` at `offset`.
    pub fn param(&mut self, weights: &[f64], offset: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if offset + len > self.n_params || offset + len > weights.len() {
            return Err(TensorError::ParamRange {
                offset,
                len,
                total: self.n_params.min(weights.len()),
            });
        }
        let t = Tensor::new(shape, weights[offset..offset + len].to_vec())?;
        self.push(Op::Param { offset }, t, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], data)?, "matmul")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), t, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), t, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), t, "mul")
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let r = tr.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, r[i % c]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x[i, :] + row` for every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        self.push(Op::AddRow(x, row), t, "add_row")
    }

    /// `x[i, :] * row` for every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        self.push(Op::MulRow(x, row), t, "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * s).collect(),
        )?;
        self.push(Op::Scale(x, s), t, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| gelu(*v)).collect(),
        )?;
        self.push(Op::Gelu(x), t, "gelu")
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(Op::LayerNorm { x, inv_std }, t, "layer_norm")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (oi, v) in o.iter_mut().zip(row) {
                *oi = (v - max).exp();
                sum += *oi;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(Op::Softmax(x), t, "softmax")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let t = Tensor::new(vec![c, r], transpose_raw(tx.data(), r, c))?;
        self.push(Op::Transpose(x), t, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push(Op::Reshape(x), t, "reshape")
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        self.push(Op::GatherRows(x, idx.to_vec()), t, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
            out.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), t, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                rows,
            });
        }
        let t = Tensor::new(
            vec![len, cols],
            tx.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        self.push(Op::SliceRows(x, start), t, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                rows: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        self.push(Op::SliceCols(x, start), t, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        self.push(Op::ConcatCols(parts.to_vec()), t, "concat_cols")
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m), "mean")
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of `seq` rows. `q`, `k`, `v` are `[batch * seq, d]` with
    /// heads occupying consecutive column blocks of width `d / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: shape.clone(),
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if shape.len() != 2 || shape[0] != batch * seq || heads == 0 || !shape[1].is_multiple_of(heads) {
            let len = shape.iter().product();
            return Err(TensorError::BadShape { shape, len });
        }
        let d = shape[1];
        let dh = d / heads;
        let dims = AttnDims {
            batch,
            seq,
            heads,
            scale: 1.0 / (dh as f64).sqrt(),
        };
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut row = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        *r = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * dims.scale;
                        max = max.max(*r);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for (j, r) in row.iter().enumerate() {
                        let a = r / sum;
                        p[i * seq + j] = a;
                        let vj = &vd[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += a * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            t,
            "attention",
        )
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let AttnDims {
            batch,
            seq,
            heads,
            scale,
        } = dims;
        let dh = d / heads;
        let (mut dq, mut dk, mut dv) = (
            vec![0.0; qd.len()],
            vec![0.0; kd.len()],
            vec![0.0; vd.len()],
        );
        let mut ds = vec![0.0; seq];
        let at = |b: usize, i: usize, h: usize| (b * seq + i) * d + h * dh;
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let gi = &g[at(b, i, h)..at(b, i, h) + dh];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        let a = p[i * seq + j];
                        let vj = &vd[at(b, j, h)..at(b, j, h) + dh];
                        let da: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        ds[j] = da;
                        dot += a * da;
                        for (dvv, gg) in dv[at(b, j, h)..at(b, j, h) + dh].iter_mut().zip(gi) {
                            *dvv += a * gg;
                        }
                    }
                    for j in 0..seq {
                        let s = p[i * seq + j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let (qo, ko) = (at(b, i, h), at(b, j, h));
                        for c in 0..dh {
                            dq[qo + c] += s * kd[ko + c];
                            dk[ko + c] += s * qd[qo + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    /// Convenience: seeds the backward pass with ones.
    pub fn backward_scalar(&self, output: Var) -> Result<Vec<f64>> {
        let seed = Tensor::new(
            self.shape_checked(output)?.to_vec(),
            vec![1.0; self.nodes[output.0].value.len()],
        )?;
        self.backward(output, &seed)
    }

    fn shape_checked(&self, v: Var) -> Result<&[usize]> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.shape())
            .ok_or(TensorError::NotEvaluated)
    }

    /// Propagates `output_grad` back through the tape and returns the gradient
    /// of every parameter leaf, scattered into a flat vector of `n_params`.
    pub fn backward(&self, output: Var, output_grad: &Tensor) -> Result<Vec<f64>> {
        let out_shape = self.shape_checked(output)?;
        if out_shape != output_grad.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: out_shape.to_vec(),
                rhs: output_grad.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(output_grad.data().to_vec());
        let mut flat = vec![0.0; self.n_params];

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (f, gi) in flat[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *f += gi;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let da = matmul_bt(&g, tb.data(), n, m, k);
                    let db = matmul_at(ta.data(), &g, n, k, m);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    let da = g.iter().zip(tb).map(|(gi, bi)| gi * bi).collect();
                    let db = g.iter().zip(ta).map(|(gi, ai)| gi * ai).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let c = self.value(*row).len();
                    let mut dr = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        dr[i % c] += gi;
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    let r = self.value(*row).data();
                    let xd = self.value(*x).data();
                    let c = r.len();
                    let mut dr = vec![0.0; c];
                    let mut dx = vec![0.0; g.len()];
                    for (i, gi) in g.iter().enumerate() {
                        dr[i % c] += gi * xd[i];
                        dx[i] = gi * r[i % c];
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * s).collect());
                }
                Op::Gelu(x) => {
                    let xd = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xd)
                        .map(|(gi, xi)| gi * gelu_grad(*xi))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gy = &g[r * cols..(r + 1) * cols];
                        let yr = y.row(r);
                        let mg = gy.iter().sum::<f64>() / cols as f64;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] = is * (gy[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..y.rows() {
                        let gy = &g[r * cols..(r + 1) * cols];
                        let yr = y.row(r);
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = yr[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    accumulate(&mut grads, *x, transpose_raw(&g, s[0], s[1]));
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::GatherRows(x, idx) => {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut dx = vec![0.0; tx.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            dx[i * cols + j] += g[k * cols + j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut grads, *p, g[at..at + n].to_vec());
                        at += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut dx = vec![0.0; tx.len()];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let w = node.value.cols();
                    let mut dx = vec![0.0; tx.len()];
                    for r in 0..tx.rows() {
                        dx[r * cols + start..r * cols + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + at..r * total + at + w]);
                        }
                        accumulate(&mut grads, *p, dp);
                        at += w;
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    dims,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *dims, probs, &g);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
            }
        }
        Ok(flat)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Compares an analytic gradient against central differences.
///
/// `loss_and_grad` evaluates the loss and its analytic gradient at a
/// parameter vector. `coords` restricts the check to a subset of
/// coordinates (all when `None`). Returns
/// `max_i |analytic_i - fd_i| / (|fd_i| + epsilon)`, with `epsilon` also the
/// finite-difference step. An empty parameter vector yields 0.
pub fn finite_difference_check<F>(
    mut loss_and_grad: F,
    params: &[f64],
    epsilon: f64,
    coords: Option<&[usize]>,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    if params.is_empty() {
        return Ok(0.0);
    }
    let (_, analytic) = loss_and_grad(params)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + epsilon;
        let (lp, _) = loss_and_grad(&work)?;
        work[i] = orig - epsilon;
        let (lm, _) = loss_and_grad(&work)?;
        work[i] = orig;
        let fd = (lp - lm) / (2.0 * epsilon);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + epsilon));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new(0);
        let i = g
            .input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let x = g
            .input(Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap())
            .unwrap();
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new(0);
        let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new(0);
        let a = g.input(Tensor::vector(vec![f64::MAX])).unwrap();
        assert_eq!(g.scale(a, 10.0), Err(TensorError::NonFinite("scale")));
        assert!(g.input(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn square_gradient() {
        let w = [3.0];
        let mut g = Graph::new(1);
        let t = g.param(&w, 0, vec![1]).unwrap();
        let sq = g.mul(t, t).unwrap();
        assert_eq!(g.backward_scalar(sq).unwrap(), vec![6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let w = [3.0, -1.0];
        let mut g = Graph::new(2);
        let _t = g.param(&w, 0, vec![2]).unwrap();
        let c = g.input(Tensor::scalar(4.0)).unwrap();
        let l = g.mean(c).unwrap();
        assert_eq!(g.backward_scalar(l).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_on_empty_graph_fails() {
        let g = Graph::new(1);
        assert_eq!(g.backward_scalar(Var(0)), Err(TensorError::NotEvaluated));
    }

    #[test]
    fn param_range_checked() {
        let mut g = Graph::new(2);
        assert!(matches!(
            g.param(&[1.0, 2.0], 1, vec![2]),
            Err(TensorError::ParamRange { .. })
        ));
    }

    #[test]
    fn quadratic_fd_check() {
        // L = sum_i (i+1) * w_i^2
        let f = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            let l = w
                .iter()
                .enumerate()
                .map(|(i, x)| (i as f64 + 1.0) * x * x)
                .sum();
            let g = w
                .iter()
                .enumerate()
                .map(|(i, x)| 2.0 * (i as f64 + 1.0) * x)
                .collect();
            Ok((l, g))
        };
        let err = finite_difference_check(f, &[0.3, -1.2, 2.5], 1e-5, None).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_param_fd_check_is_zero() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((1.0, vec![])) };
        assert_eq!(finite_difference_check(f, &[], 1e-5, None).unwrap(), 0.0);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // tanh-approximation value at 1.0
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }
}
