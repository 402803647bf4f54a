//! Dense row-major tensors and the handful of kernels the layers need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array stored row-major.
///
/// Every extent is at least one and `data.len()` equals the product of the
/// extents. The last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if an extent is zero.
    pub fn full(shape: &[usize], value: S) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a tensor from `f64` values, converting to `S`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("comparing {:?} with {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    /// Converts every element to another scalar width.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim(format!("matmul of {:?} by {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, &self.data, &other.data, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("transpose of {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Multiplies every slice along `axis` by the matching entry of `s`.
    pub fn scale_axis(&self, axis: usize, s: &[S]) -> Result<Self> {
        if axis >= self.rank() || self.shape[axis] != s.len() {
            return Err(Error::dim(format!(
                "scaling axis {axis} of {:?} by {} factors",
                self.shape,
                s.len()
            )));
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = self.clone();
        for o in 0..outer {
            for (c, &k) in s.iter().enumerate().take(len) {
                let start = (o * len + c) * inner;
                for v in &mut out.data[start..start + inner] {
                    *v *= k;
                }
            }
        }
        Ok(out)
    }

    /// Multiplies channel `i` (the first axis) by `s[i]`.
    pub fn channel_scale(&self, s: &Tensor<S>) -> Result<Self> {
        if s.rank() != 1 {
            return Err(Error::dim(format!("channel scale vector has shape {:?}", s.shape)));
        }
        self.scale_axis(0, &s.data)
    }

    /// `Σ |t_i|^p`, the p-th power of the p-norm.
    pub fn norm_p(&self, p: S) -> Result<S> {
        if !(p > S::zero()) {
            return Err(Error::arg(format!("norm exponent must be positive, got {p}")));
        }
        Ok(if p == S::one() {
            self.data.iter().map(|v| v.abs()).sum()
        } else if p == S::of(2.0) {
            self.data.iter().map(|&v| v * v).sum()
        } else {
            self.data.iter().map(|v| v.abs().powf(p)).sum()
        })
    }

    /// Drops the given positions along `axis`. Indices must be distinct and in range.
    pub fn remove_indices(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::arg(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let len = self.shape[axis];
        let mut drop = vec![false; len];
        for &i in indices {
            if i >= len {
                return Err(Error::arg(format!(
                    "index {i} out of range for axis {axis} of {:?}",
                    self.shape
                )));
            }
            if drop[i] {
                return Err(Error::arg(format!("index {i} listed twice")));
            }
            drop[i] = true;
        }
        if indices.is_empty() {
            return Ok(self.clone());
        }
        if indices.len() == len {
            return Err(Error::arg(format!(
                "removing every position of axis {axis} of {:?}",
                self.shape
            )));
        }
        let (outer, _, inner) = self.split_at_axis(axis);
        let mut data = Vec::with_capacity(self.len() / len * (len - indices.len()));
        for o in 0..outer {
            for (c, &gone) in drop.iter().enumerate() {
                if !gone {
                    let start = (o * len + c) * inner;
                    data.extend_from_slice(&self.data[start..start + inner]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = len - indices.len();
        Tensor::new(shape, data)
    }

    /// Gathers the given rows along the first axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::arg("gathering zero rows"));
        }
        let stride = self.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::arg(format!("row {r} out of range for {:?}", self.shape)));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    /// Index of the largest entry in each row of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.shape[self.rank() - 1];
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// `(outer, len, inner)` sizes around `axis`.
    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub(crate) fn gemm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for v in out.iter_mut() {
        *v = S::zero();
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`, overwriting `out`.
pub(crate) fn gemm_a_bt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_at_b_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
