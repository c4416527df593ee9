//! Proximal maps for the two set-valued terms of the splitting: the minimum
//! monitor-unit set `C = {x : xᵢ ∈ {0} ∪ [α, ∞)}` and the polyhedron
//! `D = {x : Qx ≥ u}` through its smoothed squared distance.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, DenseVector};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MmuMode {
    /// Euclidean nearest point in `C`.
    #[default]
    Exact,
    /// Keeps `xᵢ` when `xᵢ ≥ α/2` and zeroes it otherwise. Values in `[α/2, α)`
    /// are left in place, so the output is not always a member of `C`.
    #[serde(rename = "paper")]
    PaperFormula,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmuSet {
    pub alpha: f64,
    pub mode: MmuMode,
}

impl MmuSet {
    pub fn new(alpha: f64, mode: MmuMode) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid {
                field: "alpha",
                msg: format!("minimum monitor units must be finite and >= 0, got {alpha}"),
            });
        }
        Ok(Self { alpha, mode })
    }

    #[inline]
    pub fn project_scalar(&self, v: f64) -> f64 {
        let half = 0.5 * self.alpha;
        if v < half {
            return 0.0;
        }
        match self.mode {
            MmuMode::Exact => v.max(self.alpha),
            MmuMode::PaperFormula => v,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|&v| v == 0.0 || v >= self.alpha)
    }
}

pub fn project_mmu(set: &MmuSet, x: &[f64]) -> DenseVector {
    x.iter().map(|&v| set.project_scalar(v)).collect()
}

pub fn project_mmu_into(set: &MmuSet, x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = set.project_scalar(v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DykstraOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DykstraOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

/// `{x : Qx ≥ u}` as an intersection of halfspaces. A polyhedron with no rows
/// is the whole space.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    rows: SparseMatrix,
    bounds: DenseVector,
    row_norms_sq: DenseVector,
}

impl Polyhedron {
    pub fn new(rows: SparseMatrix, bounds: DenseVector) -> Result<Self> {
        check_len("polyhedron bounds", rows.n_rows(), bounds.len())?;
        if bounds.iter().any(|b| !b.is_finite()) {
            return Err(Error::Invalid {
                field: "bounds",
                msg: "non-finite bound".into(),
            });
        }
        let row_norms_sq = rows.row_norms_sq();
        if let Some(k) = row_norms_sq.iter().position(|&n| n == 0.0) {
            return Err(Error::Invalid {
                field: "rows",
                msg: format!("constraint row {k} is identically zero"),
            });
        }
        Ok(Self {
            rows,
            bounds,
            row_norms_sq,
        })
    }

    /// The whole space `ℝⁿ`.
    pub fn unconstrained(dim: usize) -> Self {
        Self {
            rows: SparseMatrix::zeros(0, dim),
            bounds: Vec::new(),
            row_norms_sq: Vec::new(),
        }
    }

    pub fn rows(&self) -> &SparseMatrix {
        &self.rows
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    pub fn n_constraints(&self) -> usize {
        self.rows.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.n_cols()
    }

    /// `max_k max(0, u_k − ⟨q_k, x⟩)`
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        (0..self.n_constraints())
            .map(|k| self.bounds[k] - self.rows.row_dot(k, x))
            .fold(0.0, f64::max)
    }

    /// Feasibility slack used by the projection's stopping rule.
    pub fn feasibility_tol(&self, tol: f64) -> f64 {
        tol * (1.0 + linalg::norm_inf(&self.bounds))
    }

    /// Euclidean projection onto the polyhedron, cold start.
    pub fn project(&self, x: &[f64], opts: &DykstraOptions) -> Result<DenseVector> {
        let mut duals = Vec::new();
        self.project_warm(x, opts, &mut duals).map(|(p, _)| p)
    }

    /// Dykstra's method specialised to halfspaces: the correction for row `k`
    /// is always a nonnegative multiple `μ_k·q_k`, so the iterate is
    /// `p = x + Σ μ_k q_k` and each step is one coordinate of the dual ascent.
    /// `duals` holds the multipliers `μ`; passing back the multipliers of a
    /// nearby point warm-starts the sweep. Returns the projection and the
    /// number of sweeps used.
    pub fn project_warm(
        &self,
        x: &[f64],
        opts: &DykstraOptions,
        duals: &mut Vec<f64>,
    ) -> Result<(DenseVector, usize)> {
        check_len("projection point", self.dim(), x.len())?;
        let m = self.n_constraints();
        if duals.len() != m {
            duals.clear();
            duals.resize(m, 0.0);
        }
        let mut p = x.to_vec();
        if m == 0 {
            return Ok((p, 0));
        }
        for (k, &mu) in duals.iter().enumerate() {
            if mu != 0.0 {
                self.rows.add_scaled_row(k, mu, &mut p);
            }
        }

        let feas_tol = self.feasibility_tol(opts.tol);
        let move_tol = opts.tol * (1.0 + linalg::norm_inf(x));
        for sweep in 1..=opts.max_iter {
            let mut max_move = 0.0f64;
            for k in 0..m {
                let step = (self.bounds[k] - self.rows.row_dot(k, &p)) / self.row_norms_sq[k];
                let new_mu = (duals[k] + step).max(0.0);
                let delta = new_mu - duals[k];
                if delta != 0.0 {
                    self.rows.add_scaled_row(k, delta, &mut p);
                    duals[k] = new_mu;
                    max_move = max_move.max(delta.abs() * self.row_norms_sq[k].sqrt());
                }
            }
            if max_move <= move_tol && self.max_violation(&p) <= feas_tol {
                return Ok((p, sweep));
            }
        }
        Err(Error::ProjectionNotConverged {
            iterations: opts.max_iter,
            worst_violation: self.max_violation(&p),
        })
    }
}

pub fn project_polyhedron(set: &Polyhedron, x: &[f64], opts: &DykstraOptions) -> Result<DenseVector> {
    set.project(x, opts)
}

/// `F(x) = (λ/2)·dist²(x, D)`, a smooth surrogate of the indicator of `D`
/// whose gradient `λ(x − P_D(x))` is `λ`-Lipschitz.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedDistance {
    pub set: Polyhedron,
    pub lambda: f64,
    pub dykstra: DykstraOptions,
}

impl SmoothedDistance {
    pub fn new(set: Polyhedron, lambda: f64, dykstra: DykstraOptions) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid {
                field: "lambda",
                msg: format!("smoothing weight must be > 0, got {lambda}"),
            });
        }
        if !(dykstra.tol > 0.0) || dykstra.max_iter == 0 {
            return Err(Error::Invalid {
                field: "dykstra",
                msg: "tolerance must be > 0 and max_iter >= 1".into(),
            });
        }
        Ok(Self {
            set,
            lambda,
            dykstra,
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<DenseVector> {
        self.set.project(x, &self.dykstra)
    }

    pub fn project_warm(&self, x: &[f64], duals: &mut Vec<f64>) -> Result<DenseVector> {
        self.set.project_warm(x, &self.dykstra, duals).map(|(p, _)| p)
    }

    /// Value and gradient given an already computed projection of `x`.
    pub fn value_grad_with_projection(&self, x: &[f64], proj: &[f64]) -> (f64, DenseVector) {
        let diff = linalg::sub(x, proj);
        let value = 0.5 * self.lambda * linalg::norm_sq(&diff);
        (value, linalg::scale(self.lambda, &diff))
    }

    /// `((λ/2)‖x − P_D(x)‖², λ(x − P_D(x)))`
    pub fn value_grad(&self, x: &[f64]) -> Result<(f64, DenseVector)> {
        let proj = self.project(x)?;
        Ok(self.value_grad_with_projection(x, &proj))
    }

    /// `prox_{γF}(x) = (x + γλ·P_D(x)) / (1 + γλ)` from a given projection.
    pub fn prox_with_projection(&self, gamma: f64, x: &[f64], proj: &[f64]) -> DenseVector {
        let gl = gamma * self.lambda;
        let denom = 1.0 + gl;
        x.iter()
            .zip(proj)
            .map(|(&xi, &pi)| (xi + gl * pi) / denom)
            .collect()
    }

    pub fn prox(&self, gamma: f64, x: &[f64]) -> Result<DenseVector> {
        check_gamma(gamma)?;
        let proj = self.project(x)?;
        Ok(self.prox_with_projection(gamma, x, &proj))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid {
            field: "gamma",
            msg: format!("step size must be > 0, got {gamma}"),
        });
    }
    Ok(())
}

pub fn prox_smoothed_distance(f: &SmoothedDistance, gamma: f64, x: &[f64]) -> Result<DenseVector> {
    f.prox(gamma, x)
}

pub fn smoothed_distance_value_grad(f: &SmoothedDistance, x: &[f64]) -> Result<(f64, DenseVector)> {
    f.value_grad(x)
}
