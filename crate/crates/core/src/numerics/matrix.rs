use serde::{Deserialize, Serialize};

use super::is_masked;
use crate::error::{invalid, shape_err, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Horizontal concatenation `[a, b, ...]`.
    pub fn hcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks
            .first()
            .map(|m| m.rows)
            .ok_or_else(|| invalid!("hcat of zero blocks"))?;
        if blocks.iter().any(|m| m.rows != rows) {
            return Err(shape_err!("hcat with differing row counts"));
        }
        let cols: usize = blocks.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in blocks {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Vertical concatenation `[a; b; ...]`.
    pub fn vcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks
            .first()
            .map(|m| m.cols)
            .ok_or_else(|| invalid!("vcat of zero blocks"))?;
        if blocks.iter().any(|m| m.cols != cols) {
            return Err(shape_err!("vcat with differing column counts"));
        }
        let rows = blocks.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in blocks {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self
            .sub(other)?
            .data
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-wise softmax with per-row max subtraction. Entries at or below the
/// masking threshold get exactly zero weight.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        if let Some(x) = row.iter().find(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("softmax input {x} in row {i}")));
        }
        let max = row
            .iter()
            .copied()
            .filter(|&x| !is_masked(x))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptySoftmaxRow { row: i });
        }
        let dst = out.row_mut(i);
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = if is_masked(x) { 0.0 } else { (x - max).exp() };
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

/// `a · b` with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err!(
            "matmul of {}x{} by {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Cosine similarity between corresponding rows of `a` and `b`.
pub fn cosine_similarity_rows(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "cosine similarity of {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    (0..a.rows)
        .map(|i| {
            let (ra, rb) = (a.row(i), b.row(i));
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm { row: i });
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            Ok((dot / (na * nb)).clamp(-1.0, 1.0))
        })
        .collect()
}
