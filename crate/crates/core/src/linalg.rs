//! Dense row-major `f64` matrices and the handful of operations the scorer
//! and the trainer need.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, LinalgError>;

/// Dense row-major matrix.
///
/// Empty matrices (zero rows or zero columns) can be built so that callers
/// can represent "no attributes", but every operation rejects them.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(alloc::format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::Numeric(alloc::format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Crate-internal mutable access; callers must keep entries finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Multiplies every entry by `k`.
    pub fn scale(&self, k: f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|v| v * k).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// Selects rows in the given order.
    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    fn shape_str(&self) -> String {
        alloc::format!("{}x{}", self.rows, self.cols)
    }

    fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(LinalgError::Shape(alloc::format!(
                "{what}: empty matrix {}",
                self.shape_str()
            )))
        } else {
            Ok(())
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape(alloc::format!(
            "matmul: {} x {} not conformable",
            a.shape_str(),
            b.shape_str()
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Matrix::new(a.rows, b.cols, out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::Shape(alloc::format!(
            "matmul_transposed: {} x ({})ᵀ not conformable",
            a.shape_str(),
            b.shape_str()
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.push(dot(a.row(i), b.row(j)));
        }
    }
    Matrix::new(a.rows, b.rows, out)
}

/// Softmax of each row, computed after subtracting the row maximum.
pub fn row_softmax(m: &Matrix) -> Result<Matrix> {
    m.require_nonempty("row_softmax")?;
    let mut out = Vec::with_capacity(m.data.len());
    for row in m.row_iter() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = libm::exp(v - max);
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Matrix::new(m.rows, m.cols, out)
}

/// Maximum of each row.
pub fn row_max(m: &Matrix) -> Result<Vec<f64>> {
    m.require_nonempty("row_max")?;
    Ok(m.row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Maximum of each column.
pub fn col_max(m: &Matrix) -> Result<Vec<f64>> {
    m.require_nonempty("col_max")?;
    let mut out = m.row(0).to_vec();
    for row in m.row_iter().skip(1) {
        for (o, &v) in out.iter_mut().zip(row) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Central-difference gradient `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LinalgError::Numeric(alloc::format!(
            "finite_diff_grad: eps must be positive, got {eps}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(LinalgError::Numeric(alloc::format!(
                "finite_diff_grad: non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}
