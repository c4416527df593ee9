//! The stochastic three-operator splitting iteration
//!
//! ```text
//! y⁺ = prox_{γF}(x)
//! z⁺ = prox_{γG}(2y⁺ − γ∇̃H(y⁺) − x)
//! x⁺ = x + z⁺ − y⁺
//! ```
//!
//! with `F` the smoothed squared distance to the dose/dose-rate polyhedron,
//! `G` the indicator of the minimum monitor-unit set and `∇̃H` one of the
//! estimators in [`crate::estimators`].

mod diagnostics;
mod thresholds;

pub use diagnostics::{
    check_four_point_identity, check_step_bound, check_lemma_identities, four_point_identity_sides, phi_energy,
    stationarity_residual, IdentityViolation, StepBoundViolation, LemmaReport,
};
pub use thresholds::{
    estimate_lipschitz, gamma_threshold_unbiased, gamma_threshold_vr, k_constant, lambda1_gamma,
    lambda_gamma, t_gamma, LipschitzConstants, VarianceSurrogates,
};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimators::{EstimatorKind, EstimatorState};
use crate::linalg::{self, DenseVector};
use crate::objective::LeastSquares;
use crate::projections::{project_mmu_into, MmuSet, SmoothedDistance};

/// `F + G + H` with `F` smooth, `G` the indicator of an MMU set (or absent)
/// and `H` a least-squares finite sum.
#[derive(Debug, Clone)]
pub struct CompositeProblem {
    pub h: LeastSquares,
    pub f: SmoothedDistance,
    pub g: Option<MmuSet>,
}

impl CompositeProblem {
    pub fn new(h: LeastSquares, f: SmoothedDistance, g: Option<MmuSet>) -> Result<Self> {
        check_len("constraint dimension", h.dim(), f.set.dim())?;
        Ok(Self { h, f, g })
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn n_samples(&self) -> usize {
        self.h.n_samples()
    }

    /// `G(z)`: 0 on the set, `+∞` off it.
    pub fn g_value(&self, z: &[f64]) -> f64 {
        match &self.g {
            Some(set) if !set.contains(z) => f64::INFINITY,
            _ => 0.0,
        }
    }

    /// `F(x) + H(x)`, the objective without the MMU indicator.
    pub fn smooth_value(&self, x: &[f64]) -> Result<f64> {
        let (f, _) = self.f.value_grad(x)?;
        Ok(f + self.h.value(x)?)
    }

    pub fn prox_g_into(&self, v: &[f64], out: &mut [f64]) {
        match &self.g {
            Some(set) => project_mmu_into(set, v, out),
            None => out.copy_from_slice(v),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub max_epochs: usize,
    /// Hard cap on iterations in addition to the epoch budget.
    #[serde(default)]
    pub max_iters: Option<usize>,
    pub residual_tol: f64,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub c1: f64,
    pub record_energy: bool,
    pub record_stride: usize,
    /// Store measured wall time in the history. Off by default so that
    /// histories are byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl SolverConfig {
    pub const DEFAULT_C1: f64 = 0.5;
    /// Fraction of the unbiased step threshold used when no step is given.
    pub const AUTO_GAMMA_FACTOR: f64 = 0.9;

    pub fn new(gamma: f64, estimator: EstimatorKind) -> Self {
        Self {
            gamma,
            max_epochs: 100,
            max_iters: None,
            residual_tol: 1e-6,
            estimator,
            seed: 0,
            c1: Self::DEFAULT_C1,
            record_energy: true,
            record_stride: 1,
            record_wall_time: false,
        }
    }

    /// `γ = 0.9 × min{1/L, …}` from the problem's Lipschitz constants.
    pub fn auto_gamma(problem: &CompositeProblem) -> f64 {
        Self::AUTO_GAMMA_FACTOR * gamma_threshold_unbiased(&estimate_lipschitz(problem))
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid {
                field: "gamma",
                msg: format!("step size must be > 0, got {}", self.gamma),
            });
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::Invalid {
                field: "residual_tol",
                msg: format!("must be > 0, got {}", self.residual_tol),
            });
        }
        if !(self.c1 > 0.0) {
            return Err(Error::Invalid {
                field: "c1",
                msg: format!("must be > 0, got {}", self.c1),
            });
        }
        if self.record_stride == 0 {
            return Err(Error::Invalid {
                field: "record_stride",
                msg: "must be >= 1".into(),
            });
        }
        self.estimator.validate(n_samples)
    }
}

/// Iterates of the splitting. `prev_y`/`prev_x` hold `y_{t−1}`/`x_{t−1}`;
/// before the first step `y = z = x = x₀`.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: DenseVector,
    pub y: DenseVector,
    pub z: DenseVector,
    pub prev_y: DenseVector,
    pub prev_x: DenseVector,
    pub iter: usize,
    pub grad_evals: usize,
    /// `P_D` of the point `y` was computed from; equal to `P_D(y)` because `y`
    /// lies on the segment between that point and its projection.
    proj_y: DenseVector,
    duals: Vec<f64>,
}

impl SolverState {
    pub fn new(problem: &CompositeProblem, x0: DenseVector) -> Result<Self> {
        check_len("initial point", problem.dim(), x0.len())?;
        if !linalg::all_finite(&x0) {
            return Err(Error::NonFinite {
                iter: 0,
                what: "x0",
            });
        }
        let mut duals = Vec::new();
        let proj_y = problem.f.project_warm(&x0, &mut duals)?;
        Ok(Self {
            y: x0.clone(),
            z: x0.clone(),
            prev_y: x0.clone(),
            prev_x: x0.clone(),
            x: x0,
            iter: 0,
            grad_evals: 0,
            proj_y,
            duals,
        })
    }

    pub fn zeros(problem: &CompositeProblem) -> Result<Self> {
        Self::new(problem, vec![0.0; problem.dim()])
    }

    /// `‖z − y‖`
    pub fn residual(&self) -> f64 {
        linalg::dist(&self.z, &self.y)
    }

    pub fn projection_of_y(&self) -> &[f64] {
        &self.proj_y
    }

    fn is_finite(&self) -> bool {
        linalg::all_finite(&self.x) && linalg::all_finite(&self.y) && linalg::all_finite(&self.z)
    }
}

/// One iteration; exactly one estimator call.
pub fn stos_step(
    state: &mut SolverState,
    problem: &CompositeProblem,
    estimator: &mut EstimatorState,
    gamma: f64,
) -> Result<()> {
    check_len("state", problem.dim(), state.x.len())?;
    let proj = problem.f.project_warm(&state.x, &mut state.duals)?;
    let y = problem.f.prox_with_projection(gamma, &state.x, &proj);
    let est = estimator.estimate_gradient(&problem.h, &y)?;

    let v: Vec<f64> = y
        .iter()
        .zip(&est.gradient)
        .zip(&state.x)
        .map(|((&yi, &gi), &xi)| 2.0 * yi - gamma * gi - xi)
        .collect();
    let mut z = vec![0.0; v.len()];
    problem.prox_g_into(&v, &mut z);
    let x_new: Vec<f64> = state
        .x
        .iter()
        .zip(&z)
        .zip(&y)
        .map(|((&xi, &zi), &yi)| xi + (zi - yi))
        .collect();

    state.prev_x = std::mem::replace(&mut state.x, x_new);
    state.prev_y = std::mem::replace(&mut state.y, y);
    state.z = z;
    state.proj_y = proj;
    state.iter += 1;
    state.grad_evals += est.cost;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Per-sample gradient evaluations divided by `N`.
    pub epoch: f64,
    /// `F(z) + H(z)` at the current MMU iterate.
    pub objective: f64,
    pub phi: f64,
    /// `‖z − y‖`
    pub residual: f64,
    pub stationarity: f64,
    pub grad_evals: usize,
    pub wall_ms: f64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str =
        "iter,epoch,objective,phi,residual,stationarity,grad_evals,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{},{:e}",
            self.iter,
            self.epoch,
            self.objective,
            self.phi,
            self.residual,
            self.stationarity,
            self.grad_evals,
            self.wall_ms
        )
    }
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(IterationRecord::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    EpochBudget,
    IterationCap,
    /// `max_epochs == 0`: no step was taken.
    NoBudget,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: SolverState,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Estimator calls including initialization passes.
    pub estimator_calls: usize,
}

impl RunOutput {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }
}

/// Scratch for per-record diagnostics (warm-started projection of `z`).
#[derive(Debug, Default)]
struct DiagnosticScratch {
    duals_z: Vec<f64>,
}

fn make_record(
    state: &SolverState,
    problem: &CompositeProblem,
    config: &SolverConfig,
    scratch: &mut DiagnosticScratch,
    started: &Instant,
) -> Result<IterationRecord> {
    let proj_z = problem.f.project_warm(&state.z, &mut scratch.duals_z)?;
    let (f_z, grad_f_z) = problem.f.value_grad_with_projection(&state.z, &proj_z);
    let objective = f_z + problem.h.value(&state.z)?;
    let stationarity =
        diagnostics::stationarity_with_projection(state, problem, config.gamma, &grad_f_z)?;
    let phi = if config.record_energy {
        phi_energy(state, problem, config.gamma, config.c1)?
    } else {
        f64::NAN
    };
    Ok(IterationRecord {
        iter: state.iter,
        epoch: state.grad_evals as f64 / problem.n_samples().max(1) as f64,
        objective,
        phi,
        residual: state.residual(),
        stationarity,
        grad_evals: state.grad_evals,
        wall_ms: if config.record_wall_time {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
    })
}

/// Runs from `x₀ = 0`.
pub fn run(problem: &CompositeProblem, config: &SolverConfig) -> Result<RunOutput> {
    run_from(problem, config, vec![0.0; problem.dim()])
}

/// Iterates until `‖z − y‖ ≤ tol·(1 + ‖x‖)`, the epoch budget
/// (`max_epochs·N` per-sample gradients) is spent, or `max_iters` is hit.
pub fn run_from(
    problem: &CompositeProblem,
    config: &SolverConfig,
    x0: DenseVector,
) -> Result<RunOutput> {
    config.validate(problem.n_samples())?;
    let mut state = SolverState::new(problem, x0)?;
    let mut estimator = EstimatorState::new(config.estimator, config.seed);
    let mut history = Vec::new();
    let budget = config.max_epochs.saturating_mul(problem.n_samples());
    if config.max_epochs == 0 {
        return Ok(RunOutput {
            state,
            history,
            stop: StopReason::NoBudget,
            estimator_calls: 0,
        });
    }

    let started = Instant::now();
    let mut scratch = DiagnosticScratch::default();
    let stop = loop {
        stos_step(&mut state, problem, &mut estimator, config.gamma)?;
        if !state.is_finite() {
            return Err(Error::NonFinite {
                iter: state.iter,
                what: "iterate",
            });
        }
        let residual = state.residual();
        let threshold = config.residual_tol * (1.0 + linalg::norm(&state.x));
        if !(residual.is_finite() && threshold.is_finite()) {
            return Err(Error::NonFinite {
                iter: state.iter,
                what: "residual",
            });
        }
        let converged = residual <= threshold;
        let out_of_epochs = state.grad_evals >= budget;
        let capped = config.max_iters.is_some_and(|m| state.iter >= m);
        let last = converged || out_of_epochs || capped;
        if last || state.iter % config.record_stride == 0 {
            history.push(make_record(&state, problem, config, &mut scratch, &started)?);
        }
        if converged {
            break StopReason::Converged;
        }
        if out_of_epochs {
            break StopReason::EpochBudget;
        }
        if capped {
            break StopReason::IterationCap;
        }
    };
    log::debug!(
        "run stopped after {} iterations ({:?}), residual {:.3e}",
        state.iter,
        stop,
        state.residual()
    );
    Ok(RunOutput {
        state,
        history,
        stop,
        estimator_calls: estimator.calls(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projections::{DykstraOptions, MmuMode, Polyhedron};
    use crate::sparse::SparseMatrix;

    fn free_problem(a: SparseMatrix, b: Vec<f64>) -> CompositeProblem {
        let n = a.n_cols();
        CompositeProblem::new(
            LeastSquares::new(a, b).unwrap(),
            SmoothedDistance::new(Polyhedron::unconstrained(n), 1.0, DykstraOptions::default()).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn reduces_to_gradient_descent() {
        // F = 0, G = 0, H = ½x², γ = 0.5, x₀ = 1 → x₁ = 0.5
        let p = free_problem(SparseMatrix::identity(1), vec![0.0]);
        let mut s = SolverState::new(&p, vec![1.0]).unwrap();
        let mut e = EstimatorState::new(EstimatorKind::Full, 0);
        stos_step(&mut s, &p, &mut e, 0.5).unwrap();
        assert_eq!(s.x, vec![0.5]);
        assert_eq!(s.grad_evals, 1);
    }

    #[test]
    fn fixed_point_is_stationary_under_step() {
        let p = free_problem(SparseMatrix::identity(2), vec![1.0, -2.0]);
        let mut s = SolverState::new(&p, vec![1.0, -2.0]).unwrap();
        let mut e = EstimatorState::new(EstimatorKind::Full, 0);
        stos_step(&mut s, &p, &mut e, 0.3).unwrap();
        assert_eq!(s.y, s.z);
        assert_eq!(s.x, vec![1.0, -2.0]);
    }

    #[test]
    fn strongly_convex_quadratic_converges() {
        let a = SparseMatrix::from_dense(&[
            vec![2.0, 0.5, 0.0],
            vec![0.0, 1.5, 0.3],
            vec![0.4, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap();
        let p = free_problem(a.clone(), vec![1.0, 2.0, -1.0, 0.5]);
        // γ = 1/L_H with L_H = λ_max(AᵀA)/N
        let gamma = 4.0 / a.spectral_norm_sq(200);
        let mut cfg = SolverConfig::new(gamma, EstimatorKind::Full);
        cfg.max_epochs = 10_000;
        cfg.max_iters = Some(500);
        cfg.residual_tol = 1e-10;
        let out = run(&p, &cfg).unwrap();
        assert!(out.converged(), "{:?}", out.history.last());
        // normal equations AᵀAx = Aᵀb solved separately
        let expected = [0.108415629025, 1.531300987548, -1.087161872048];
        for (zi, ei) in out.state.z.iter().zip(expected) {
            assert!((zi - ei).abs() < 1e-7, "{zi} vs {ei}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let p = free_problem(SparseMatrix::identity(2), vec![1.0, 1.0]);
        let mut cfg = SolverConfig::new(0.5, EstimatorKind::Full);
        cfg.max_epochs = 0;
        let out = run(&p, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.state.iter, 0);
        assert_eq!(out.state.x, vec![0.0, 0.0]);
        assert_eq!(out.stop, StopReason::NoBudget);
    }

    #[test]
    fn epoch_budget_counts_gradient_evaluations() {
        let a = SparseMatrix::from_dense(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0], vec![0.5, -1.0]])
            .unwrap();
        let p = free_problem(a, vec![1.0, 0.0, 3.0, 2.0]);
        let mut cfg = SolverConfig::new(0.1, EstimatorKind::Sgd { batch: 2 });
        cfg.max_epochs = 3;
        cfg.residual_tol = 1e-14;
        let out = run(&p, &cfg).unwrap();
        assert_eq!(out.stop, StopReason::EpochBudget);
        assert_eq!(out.state.grad_evals, 12);
        assert_eq!(out.state.iter, 6);
        assert_eq!(out.history.len(), 6);
        assert_eq!(out.history.last().unwrap().epoch, 3.0);
    }

    #[test]
    fn runs_are_reproducible() {
        let a = SparseMatrix::from_dense(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0], vec![0.5, -1.0]])
            .unwrap();
        let rows = SparseMatrix::from_dense(&[vec![1.0, 1.0]]).unwrap();
        let p = CompositeProblem::new(
            LeastSquares::new(a, vec![10.0, 0.0, 3.0, 2.0]).unwrap(),
            SmoothedDistance::new(Polyhedron::new(rows, vec![2.0]).unwrap(), 1.0, DykstraOptions::default())
                .unwrap(),
            Some(MmuSet::new(1.0, MmuMode::Exact).unwrap()),
        )
        .unwrap();
        let mut cfg = SolverConfig::new(0.2, EstimatorKind::Saga { batch: 1 });
        cfg.max_epochs = 20;
        cfg.seed = 9;
        let a = run(&p, &cfg).unwrap();
        let b = run(&p, &cfg).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.state.x, b.state.x);
    }

    #[test]
    fn rejects_bad_config() {
        let p = free_problem(SparseMatrix::identity(2), vec![1.0, 1.0]);
        let mut cfg = SolverConfig::new(-1.0, EstimatorKind::Full);
        assert!(run(&p, &cfg).is_err());
        cfg.gamma = 0.5;
        cfg.record_stride = 0;
        assert!(run(&p, &cfg).is_err());
        cfg.record_stride = 1;
        cfg.estimator = EstimatorKind::Sgd { batch: 3 };
        assert!(run(&p, &cfg).is_err());
    }

    #[test]
    fn diverging_step_is_reported() {
        let p = free_problem(SparseMatrix::from_dense(&[vec![1e150]]).unwrap(), vec![1.0]);
        let mut cfg = SolverConfig::new(1e10, EstimatorKind::Full);
        cfg.max_epochs = 1_000;
        let err = run(&p, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
