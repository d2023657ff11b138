//! Dense row-major `f64` tensors.
//!
//! Only the handful of operations the model needs are provided. Most of
//! them are rank-2; rank-1 and rank-3 tensors exist for storage (fusion
//! tensors, flattened action vectors).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self { shape: vec![r, c], data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(dim_err(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.check_2d("matmul")?;
        let (k2, c) = other.check_2d("matmul")?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(&self.data, &other.data, &mut out, r, k, c);
        Ok(Tensor { shape: vec![r, c], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.check_2d("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| f(*x)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// `self += s * other`, shapes must agree.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err("axpy", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-wise softmax with per-row max subtraction. Entries equal to
    /// `-inf` receive exactly zero weight. A row whose every entry is
    /// `-inf` is left as all zeros; see [`softmax_rows_checked`].
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.check_2d("softmax_rows")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&self.data[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        Ok(Tensor { shape: vec![r, c], data: out })
    }

    /// Kronecker product `self ⊗ other` of two matrices.
    pub fn kron(&self, other: &Tensor) -> Result<Tensor> {
        let (r1, c1) = self.check_2d("kron")?;
        let (r2, c2) = other.check_2d("kron")?;
        let (r, c) = (r1 * r2, c1 * c2);
        let mut out = vec![0.0; r * c];
        for i1 in 0..r1 {
            for j1 in 0..c1 {
                let a = self.data[i1 * c1 + j1];
                if a == 0.0 {
                    continue;
                }
                for i2 in 0..r2 {
                    for j2 in 0..c2 {
                        out[(i1 * r2 + i2) * c + j1 * c2 + j2] = a * other.data[i2 * c2 + j2];
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![r, c], data: out })
    }
}

/// Softmax of one row into `out`. Returns false when the row has no
/// finite entry (all keys forbidden).
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) -> bool {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    true
}

/// `out (r×c) = a (r×k) · b (k×c)`; `out` must be zeroed.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (r×c) += a (r×k) · bᵀ` where `b` is `c×k`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * c + j] += s;
        }
    }
}

/// `out (k×c) += aᵀ · g` where `a` is `r×k` and `g` is `r×c`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
