//! Deterministic dense numeric primitives used by every other module.
//!
//! All compute is in f64 even though weight files store f32; widening on
//! load removes accumulation-order sensitivity from the metric tolerances
//! downstream.

use crate::error::{Error, Result};

/// Row-major dense f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite matrix entry at flat index {bad}"
            )));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Matrix-vector product, summing over columns in ascending order.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: vector length {} != matrix cols {}",
                x.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            out[r] = acc;
        }
        Ok(out)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite vector entry at index {bad}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
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
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// Dot product over ascending indices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Squared Euclidean norm.
pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

/// Standard matrix product. Summation runs over the inner index in
/// ascending order, matching the naive triple-loop definition exactly.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Numerically stabilized softmax over a slice.
///
/// The maximum is subtracted before exponentiation, so inputs anywhere in
/// the f64 range produce entries in (0,1) summing to 1 within 1e-12.
pub fn softmax_slice(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of empty vector".into()));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

/// Softmax of a [`Vector`].
pub fn softmax(v: &Vector) -> Result<Vector> {
    Ok(Vector {
        data: softmax_slice(v.data())?,
    })
}

/// Bilinear resize with corner-aligned sampling.
///
/// Output cell (i,j) samples the input at
/// `(i*(R-1)/(out_rows-1), j*(C-1)/(out_cols-1))`; a size-1 output axis
/// samples coordinate 0. Resizing to the input dimensions reproduces the
/// input exactly, and every output value stays within [min, max] of the
/// input.
pub fn resize_bilinear(grid: &Matrix, out_rows: usize, out_cols: usize) -> Result<Matrix> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::Shape("resize_bilinear: empty input grid".into()));
    }
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::Shape("resize_bilinear: zero output dims".into()));
    }
    let scale = |in_n: usize, out_n: usize| -> f64 {
        if out_n > 1 {
            (in_n - 1) as f64 / (out_n - 1) as f64
        } else {
            0.0
        }
    };
    let sr = scale(grid.rows, out_rows);
    let sc = scale(grid.cols, out_cols);
    let mut out = Matrix::zeros(out_rows, out_cols);
    for i in 0..out_rows {
        let y = i as f64 * sr;
        let y0 = (y.floor() as usize).min(grid.rows - 1);
        let y1 = (y0 + 1).min(grid.rows - 1);
        let fy = y - y0 as f64;
        for j in 0..out_cols {
            let x = j as f64 * sc;
            let x0 = (x.floor() as usize).min(grid.cols - 1);
            let x1 = (x0 + 1).min(grid.cols - 1);
            let fx = x - x0 as f64;
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bot = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            out.set(i, j, top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}
