//! Dense row-major tensors of rank 1 or 2.
//!
//! Sequences are handled as lists of tensors, so nothing here needs more
//! than two dimensions. All arithmetic is `f64`.

use std::fmt;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Domain(format!(
                "tensor rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Domain(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 2,
            "tensor rank must be 1 or 2"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Domain("cannot stack zero rows".into()))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.rank() != 1 || r.len() != cols {
                return shape_err("stack", &first.shape, &r.shape);
            }
            data.extend_from_slice(&r.data);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.rank() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(op, &self.shape, &other.shape);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err("add_assign", &self.shape, &other.shape);
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Matrix product. `[m×k]·[k×n] → [m×n]`; a rank-1 right operand is a
    /// column vector and yields a rank-1 result of length `m`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rows() != self.cols() {
            return shape_err("matmul", &self.shape, &other.shape);
        }
        let (m, k) = (self.rows(), self.cols());
        if other.rank() == 1 {
            let data = self
                .data
                .chunks_exact(k.max(1))
                .take(m)
                .map(|row| dot(row, &other.data))
                .collect::<Vec<_>>();
            let data = if k == 0 { vec![0.0; m] } else { data };
            return Ok(Tensor::vector(data));
        }
        let n = other.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        match self.rank() {
            1 => Tensor {
                shape: vec![1, self.len()],
                data: self.data.clone(),
            },
            _ => {
                let (m, n) = (self.rows(), self.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = self.data[i * n + j];
                    }
                }
                Tensor {
                    shape: vec![n, m],
                    data,
                }
            }
        }
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.rank() != 2 || i >= self.rows() {
            return Err(Error::Domain(format!(
                "row {i} out of range for shape {:?}",
                self.shape
            )));
        }
        let n = self.cols();
        Ok(Tensor::vector(self.data[i * n..(i + 1) * n].to_vec()))
    }

    /// Concatenation of two vectors.
    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 1 || other.rank() != 1 {
            return shape_err("concat", &self.shape, &other.shape);
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor::vector(data))
    }

    /// Adds vector `row` to every row of a matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || row.rank() != 1 || row.len() != self.cols() {
            return shape_err("add_row", &self.shape, &row.shape);
        }
        let n = self.cols();
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(n.max(1)) {
            for (o, r) in chunk.iter_mut().zip(&row.data) {
                *o += r;
            }
        }
        Ok(out)
    }

    /// Softmax of a vector with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 {
            return shape_err("softmax", &self.shape, &[]);
        }
        Ok(Tensor::vector(softmax(&self.data)?))
    }

    /// `−log softmax(self)[target]` in log-sum-exp form.
    pub fn cross_entropy(&self, target: usize) -> Result<f64> {
        if self.rank() != 1 {
            return shape_err("cross_entropy", &self.shape, &[]);
        }
        if target >= self.len() {
            return Err(Error::Domain(format!(
                "target index {target} out of range for {} logits",
                self.len()
            )));
        }
        Ok(log_sum_exp(&self.data) - self.data[target])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
