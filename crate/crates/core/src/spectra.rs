//! Singular values by one-sided Jacobi rotations, and stable rank.

use serde::Serialize;

use crate::error::{Error, Result};

pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::BadMatrix(format!("{rows}x{cols} with {} entries", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in d.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self { rows: n, cols: n, data }
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
        self.data[r * self.cols + c]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * k).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Rows of comma-separated numbers; blank lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let before = data.len();
            for field in line.split(',') {
                data.push(field.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?);
            }
            let width = data.len() - before;
            if *cols.get_or_insert(width) != width {
                return Err(Error::BadMatrix(format!("line {} has {width} columns", n + 1)));
            }
            rows += 1;
        }
        Self::new(rows, cols.unwrap_or(0), data)
    }
}

/// Singular values in descending order, `min(rows, cols)` of them.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    if m.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    // orthogonalize the columns of a tall matrix
    let tall = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let (n_rows, n_cols) = (tall.rows, tall.cols);
    let mut cols: Vec<Vec<f64>> = (0..n_cols).map(|c| (0..n_rows).map(|r| tall.get(r, c)).collect()).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n_cols {
            for j in i + 1..n_cols {
                let (left, right) = cols.split_at_mut(j);
                let (a, b) = (&mut left[i], &mut right[0]);
                let alpha: f64 = a.iter().map(|x| x * x).sum();
                let beta: f64 = b.iter().map(|x| x * x).sum();
                let gamma: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xa, yb) = (*x, *y);
                    *x = c * xa - s * yb;
                    *y = s * xa + c * yb;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// `||M||_F^2 / ||M||_2^2`.
pub fn stable_rank(m: &DenseMatrix) -> Result<f64> {
    let sv = singular_values(m)?;
    let top = sv[0];
    if top == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let fro: f64 = sv.iter().map(|s| (s / top) * (s / top)).sum();
    Ok(fro)
}
