//! Minimal compressed-sparse-row matrices.
//!
//! The spatial operators produced by the discretizations are banded stencils
//! plus a little boundary fill-in; applying them as dense matrices would
//! dominate the step cost. This module provides just the operations the
//! steppers need: triplet assembly, matrix-vector products, and dense
//! round-trips for tests and small-scale factorizations.

use nalgebra::{DMatrix, DVector};

/// Square sparse matrix in CSR layout.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from (row, col, value) triplets; duplicate entries are summed
    /// and explicit zeros dropped.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            per_row[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Converts a dense matrix, dropping entries with |v| ≤ `drop_tol`.
    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let triplets = (0..m.nrows()).flat_map(|r| {
            (0..m.ncols()).filter_map(move |c| {
                let v = m[(r, c)];
                (v.abs() > drop_tol).then_some((r, c, v))
            })
        });
        Self::from_triplets(m.nrows(), m.ncols(), triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Iterates stored entries as `(row, col, value)` triplets.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = A·x.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// y += scale · A·x, writing into a caller-provided buffer.
    pub fn mul_vec_into(&self, x: &DVector<f64>, scale: f64, y: &mut DVector<f64>) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] += scale * acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.col_idx[k])] = self.values[k];
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn assembles_and_multiplies() {
        let a = CsrMatrix::from_triplets(3, 3, [(0, 0, 2.0), (0, 2, 1.0), (2, 1, -1.0), (0, 2, 0.5)]);
        assert_eq!(a.nnz(), 3);
        let x = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let y = a.mul_vec(&x);
        assert_abs_diff_eq!(y[0], 2.0 + 1.5 * 3.0);
        assert_abs_diff_eq!(y[1], 0.0);
        assert_abs_diff_eq!(y[2], -2.0);
    }

    #[test]
    fn dense_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 4.0]);
        let s = CsrMatrix::from_dense(&m, 0.0);
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.to_dense(), m);
    }

    #[test]
    fn accumulating_product() {
        let a = CsrMatrix::from_triplets(2, 2, [(0, 0, 1.0), (1, 1, 2.0)]);
        let x = DVector::from_row_slice(&[1.0, 1.0]);
        let mut y = DVector::from_row_slice(&[10.0, 10.0]);
        a.mul_vec_into(&x, 0.5, &mut y);
        assert_abs_diff_eq!(y[0], 10.5);
        assert_abs_diff_eq!(y[1], 11.0);
    }
}
