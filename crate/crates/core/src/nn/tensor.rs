use serde::{Deserialize, Serialize};

use crate::error::{MtdmlError, Result};

/// Dense row-major matrix of `f64`. Samples are rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(MtdmlError::dim("Tensor2::from_vec", rows * cols, values.len()));
        }
        Ok(Tensor2 { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(MtdmlError::dim("Tensor2::from_rows", cols, row.len()));
            }
            values.extend_from_slice(row);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            values,
        })
    }

    /// A single column built from a slice.
    pub fn column_vector(values: &[f64]) -> Self {
        Tensor2 {
            rows: values.len(),
            cols: 1,
            values: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, values }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor2 {
        self.map(|v| alpha * v)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "Tensor2::sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "Tensor2::add", |a, b| a + b)
    }

    pub fn zip_with(
        &self,
        other: &Tensor2,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(MtdmlError::dim(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(MtdmlError::dim("matmul", self.cols, other.rows));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        gemm(
            (self.rows, self.cols, other.cols),
            (&self.values, self.cols, 1),
            (&other.values, other.cols, 1),
            &mut out.values,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(MtdmlError::dim("matmul_tn", self.rows, other.rows));
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        gemm(
            (self.cols, self.rows, other.cols),
            (&self.values, 1, self.cols),
            (&other.values, other.cols, 1),
            &mut out.values,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(MtdmlError::dim("matmul_nt", self.cols, other.cols));
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        gemm(
            (self.rows, self.cols, other.rows),
            (&self.values, self.cols, 1),
            (&other.values, 1, other.cols),
            &mut out.values,
        );
        Ok(out)
    }

    /// Column sums as a vector of length `cols`.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn hconcat(parts: &[&Tensor2]) -> Result<Tensor2> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(MtdmlError::dim("hconcat", rows, bad.rows));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor2 { rows, cols, values })
    }

    /// Inverse of [`Tensor2::hconcat`].
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Tensor2>> {
        let total: usize = widths.iter().sum();
        if total != self.cols {
            return Err(MtdmlError::dim("split_cols", self.cols, total));
        }
        let mut parts: Vec<Tensor2> = widths.iter().map(|&w| Tensor2::zeros(self.rows, w)).collect();
        for r in 0..self.rows {
            let mut offset = 0;
            let row = self.row(r);
            for (p, &w) in parts.iter_mut().zip(widths) {
                p.row_mut(r).copy_from_slice(&row[offset..offset + w]);
                offset += w;
            }
        }
        Ok(parts)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor2 {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }
}

/// `c = a · b` for an `m×k` by `k×n` product with arbitrary strides on the operands.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: extents checked above; output is densely row-major with stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
