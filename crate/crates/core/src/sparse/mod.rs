//! Compressed sparse row matrices and the handful of kernels the solver needs:
//! full products, transposed products, and per-row access for sample gradients.

mod mtx;

pub use mtx::{load_matrix_market, read_matrix_market, save_matrix_market, write_matrix_market};

use crate::error::{check_len, Error, Result};
use crate::linalg::DenseVector;

/// Immutable CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::InvalidMatrix(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if row_offsets[0] != 0 || row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidMatrix("row_offsets not monotone from 0".into()));
        }
        if *row_offsets.last().unwrap() != values.len() || col_indices.len() != values.len() {
            return Err(Error::InvalidMatrix(
                "row_offsets, col_indices and values disagree on nnz".into(),
            ));
        }
        for r in 0..n_rows {
            let cols = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::InvalidMatrix(format!("row {r}: column index out of range")));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidMatrix(format!(
                    "row {r}: column indices not strictly increasing"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite value".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds from (row, col, value) triplets. Duplicates are summed; explicit
    /// zeros are kept so that the stored pattern matches the input.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidMatrix(format!(
                    "entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidMatrix(format!("non-finite value at ({r}, {c})")));
            }
            counts[r + 1] += 1;
        }
        for r in 0..n_rows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }

        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_offsets.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..n_rows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|&(c, _)| c);
            for &(c, v) in &scratch {
                match col_indices.last() {
                    Some(&last) if last == c && col_indices.len() > row_offsets[r] => {
                        *values.last_mut().unwrap() += v;
                    }
                    _ => {
                        col_indices.push(c);
                        values.push(v);
                    }
                }
            }
            row_offsets.push(values.len());
        }
        Self::from_csr(n_rows, n_cols, row_offsets, col_indices, values)
    }

    /// Row-major dense input; exact zeros are not stored.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut triplets = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            check_len("from_dense row", n_cols, row.len())?;
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(n_rows, n_cols, &triplets)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`. Panics if `i` is out of range.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }

    /// `out += scale * A_i`
    #[inline]
    pub fn add_scaled_row(&self, i: usize, scale: f64, out: &mut [f64]) {
        let (cols, vals) = self.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            out[c] += scale * v;
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn spmv(&self, v: &[f64]) -> Result<DenseVector> {
        check_len("spmv", self.n_cols, v.len())?;
        let mut out = vec![0.0; self.n_rows];
        self.spmv_into(v, &mut out);
        Ok(out)
    }

    /// Unchecked-length product into a preallocated buffer.
    pub fn spmv_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_cols);
        debug_assert_eq!(out.len(), self.n_rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row_dot(i, v);
        }
    }

    /// `Aᵀ w`
    pub fn spmv_transpose(&self, w: &[f64]) -> Result<DenseVector> {
        check_len("spmv_transpose", self.n_rows, w.len())?;
        let mut out = vec![0.0; self.n_cols];
        self.spmv_transpose_into(w, &mut out);
        Ok(out)
    }

    pub fn spmv_transpose_into(&self, w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(w.len(), self.n_rows);
        debug_assert_eq!(out.len(), self.n_cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                self.add_scaled_row(i, wi, out);
            }
        }
    }

    /// Gradient of `½(⟨A_i, x⟩ − b_i)²`, i.e. `A_i (⟨A_i, x⟩ − b_i)`, returned dense
    /// but supported on row `i`'s pattern.
    pub fn row_gradient(&self, i: usize, x: &[f64], b_i: f64) -> Result<DenseVector> {
        if i >= self.n_rows {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_rows,
            });
        }
        check_len("row_gradient", self.n_cols, x.len())?;
        let residual = self.row_dot(i, x) - b_i;
        let mut g = vec![0.0; self.n_cols];
        self.add_scaled_row(i, residual, &mut g);
        Ok(g)
    }

    pub fn row_norms_sq(&self) -> DenseVector {
        (0..self.n_rows)
            .map(|i| self.row(i).1.iter().map(|v| v * v).sum())
            .collect()
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: self.n_rows,
                });
            }
            let (cols, vals) = self.row(r);
            col_indices.extend_from_slice(cols);
            values.extend_from_slice(vals);
            row_offsets.push(values.len());
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Same pattern, values transformed entry-wise.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        Self {
            values,
            ..self.clone()
        }
    }

    /// `alpha * self + beta * other`, for matrices of identical shape. Pattern is
    /// the union of both patterns.
    pub fn linear_combination(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        check_len("linear_combination rows", self.n_rows, other.n_rows)?;
        check_len("linear_combination cols", self.n_cols, other.n_cols)?;
        let mut triplets: Vec<(usize, usize, f64)> = self
            .triplets()
            .map(|(r, c, v)| (r, c, alpha * v))
            .collect();
        triplets.extend(other.triplets().map(|(r, c, v)| (r, c, beta * v)));
        Self::from_triplets(self.n_rows, self.n_cols, &triplets)
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        check_len("vstack cols", self.n_cols, other.n_cols)?;
        let mut row_offsets = self.row_offsets.clone();
        let base = self.nnz();
        row_offsets.extend(other.row_offsets[1..].iter().map(|o| o + base));
        let mut col_indices = self.col_indices.clone();
        col_indices.extend_from_slice(&other.col_indices);
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Self {
            n_rows: self.n_rows + other.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Largest eigenvalue of `AᵀA` by power iteration (deterministic start).
    pub fn spectral_norm_sq(&self, iterations: usize) -> f64 {
        if self.nnz() == 0 || self.n_cols == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.n_cols as f64).sqrt(); self.n_cols];
        let mut av = vec![0.0; self.n_rows];
        let mut w = vec![0.0; self.n_cols];
        let mut estimate = 0.0;
        for _ in 0..iterations {
            self.spmv_into(&v, &mut av);
            self.spmv_transpose_into(&av, &mut w);
            let n = crate::linalg::norm(&w);
            if n == 0.0 {
                return 0.0;
            }
            estimate = crate::linalg::dot(&v, &w);
            v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / n);
        }
        estimate
    }
}
