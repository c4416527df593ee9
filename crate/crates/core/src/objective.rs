//! The smooth finite-sum term `H(x) = (1/N) Σᵢ ½(⟨Aᵢ, x⟩ − bᵢ)²`.
//!
//! The mean normalization matches the stochastic estimators, which are all
//! written in mean form. The plain sum `Σᵢ ½(⟨Aᵢ, x⟩ − bᵢ)²` is `N·H`, so a step
//! size tuned for the sum form corresponds to `N·γ` here.

use crate::error::{check_len, Error, Result};
use crate::linalg::DenseVector;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    a: SparseMatrix,
    b: DenseVector,
}

impl LeastSquares {
    pub fn new(a: SparseMatrix, b: DenseVector) -> Result<Self> {
        check_len("least-squares target", a.n_rows(), b.len())?;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid {
                field: "b",
                msg: "non-finite entry".into(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn target(&self) -> &[f64] {
        &self.b
    }

    /// Number of summands `N`.
    pub fn n_samples(&self) -> usize {
        self.a.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.a.n_cols()
    }

    /// `⟨Aᵢ, x⟩ − bᵢ`
    #[inline]
    pub fn residual(&self, i: usize, x: &[f64]) -> f64 {
        self.a.row_dot(i, x) - self.b[i]
    }

    pub fn residuals(&self, x: &[f64]) -> Result<DenseVector> {
        let mut r = self.a.spmv(x)?;
        r.iter_mut().zip(&self.b).for_each(|(ri, bi)| *ri -= bi);
        Ok(r)
    }

    /// `hᵢ(x) = ½(⟨Aᵢ, x⟩ − bᵢ)²`
    pub fn sample_value(&self, i: usize, x: &[f64]) -> f64 {
        let r = self.residual(i, x);
        0.5 * r * r
    }

    pub fn sample_gradient(&self, i: usize, x: &[f64]) -> Result<DenseVector> {
        if i >= self.n_samples() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_samples(),
            });
        }
        self.a.row_gradient(i, x, self.b[i])
    }

    /// `(1/2N)‖Ax − b‖²`
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let n = self.n_samples();
        if n == 0 {
            check_len("least-squares value", self.dim(), x.len())?;
            return Ok(0.0);
        }
        let r = self.residuals(x)?;
        Ok(0.5 * crate::linalg::norm_sq(&r) / n as f64)
    }

    /// `(1/N)Aᵀ(Ax − b)`
    pub fn full_gradient(&self, x: &[f64]) -> Result<DenseVector> {
        check_len("full_gradient", self.dim(), x.len())?;
        let n = self.n_samples();
        let mut g = vec![0.0; self.dim()];
        if n == 0 {
            return Ok(g);
        }
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let r = self.residual(i, x);
            if r != 0.0 {
                self.a.add_scaled_row(i, r * inv_n, &mut g);
            }
        }
        Ok(g)
    }

    /// Largest per-sample gradient Lipschitz constant, `maxᵢ ‖Aᵢ‖²`.
    pub fn max_sample_lipschitz(&self) -> f64 {
        self.a.row_norms_sq().into_iter().fold(0.0, f64::max)
    }
}
