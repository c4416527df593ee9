//! Energy, stationarity and run-time identity monitors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{stos_step, CompositeProblem, SolverState};
use crate::error::Result;
use crate::estimators::{EstimatorKind, EstimatorState};
use crate::linalg::{self, DenseVector};

/// `Φ(x, y, z, y′) = F(y) + G(z) + H(y) + ‖y − x‖²/2γ − ‖z − x‖²/2γ
/// + ⟨∇H(y), z − y⟩ − ½‖z − y‖² + C₁‖y − y′‖²` at the current state, with the
/// exact `∇H`. Returns `+∞` when `z` is outside the MMU set.
pub fn phi_energy(state: &SolverState, problem: &CompositeProblem, gamma: f64, c1: f64) -> Result<f64> {
    let g = problem.g_value(&state.z);
    if g.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let (f_y, _) = problem.f.value_grad_with_projection(&state.y, state.projection_of_y());
    let h_y = problem.h.value(&state.y)?;
    let grad_h_y = problem.h.full_gradient(&state.y)?;
    let z_minus_y = linalg::sub(&state.z, &state.y);
    Ok(f_y + g + h_y + linalg::dist_sq(&state.y, &state.x) / (2.0 * gamma)
        - linalg::dist_sq(&state.z, &state.x) / (2.0 * gamma)
        + linalg::dot(&grad_h_y, &z_minus_y)
        - 0.5 * linalg::norm_sq(&z_minus_y)
        + c1 * linalg::dist_sq(&state.y, &state.prev_y))
}

/// Norm of `(y − z)/γ + ∇F(z) − ∇F(y) + ∇H(z) − ∇H(y)`, an element of
/// `∂G(z) + ∇F(z) + ∇H(z)` when the step used the exact gradient, and so an
/// upper bound on the distance of `0` to that set.
pub fn stationarity_residual(state: &SolverState, problem: &CompositeProblem, gamma: f64) -> Result<f64> {
    let proj_z = problem.f.project(&state.z)?;
    let (_, grad_f_z) = problem.f.value_grad_with_projection(&state.z, &proj_z);
    stationarity_with_projection(state, problem, gamma, &grad_f_z)
}

pub(super) fn stationarity_with_projection(
    state: &SolverState,
    problem: &CompositeProblem,
    gamma: f64,
    grad_f_z: &[f64],
) -> Result<f64> {
    let (_, grad_f_y) = problem.f.value_grad_with_projection(&state.y, state.projection_of_y());
    let grad_h_z = problem.h.full_gradient(&state.z)?;
    let grad_h_y = problem.h.full_gradient(&state.y)?;
    let element: DenseVector = (0..state.y.len())
        .map(|k| {
            (state.y[k] - state.z[k]) / gamma + grad_f_z[k] - grad_f_y[k] + grad_h_z[k]
                - grad_h_y[k]
        })
        .collect();
    Ok(linalg::norm(&element))
}

/// Both sides of `‖2a−b−c−d‖² − ‖a−c−d‖² = ‖a−c‖² − ‖b−c‖² + 2‖a−b‖² + 2⟨d, b−a⟩`
/// and the magnitude scale used for the relative comparison.
pub fn four_point_identity_sides(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> (f64, f64, f64) {
    let n = a.len();
    let v1: DenseVector = (0..n).map(|k| 2.0 * a[k] - b[k] - c[k] - d[k]).collect();
    let v2: DenseVector = (0..n).map(|k| a[k] - c[k] - d[k]).collect();
    let t1 = linalg::norm_sq(&v1);
    let t2 = linalg::norm_sq(&v2);
    let t3 = linalg::dist_sq(a, c);
    let t4 = linalg::dist_sq(b, c);
    let t5 = 2.0 * linalg::dist_sq(a, b);
    let t6 = 2.0 * linalg::dot(d, &linalg::sub(b, a));
    let scale = t1 + t2 + t3 + t4 + t5 + t6.abs();
    (t1 - t2, t3 - t4 + t5 + t6, scale)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityViolation {
    pub dim: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepBoundViolation {
    pub iter: usize,
    /// `‖x_t − x_{t−1}‖`
    pub dx: f64,
    /// `(1 + γL)‖y_{t+1} − y_t‖`
    pub bound: f64,
}

/// Random Gaussian quadruples in dimension `dim`; a violation is a relative
/// disagreement above `1e-10`.
pub fn check_four_point_identity(trials: usize, dim: usize, seed: u64) -> Vec<IdentityViolation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> DenseVector { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut violations = Vec::new();
    for _ in 0..trials {
        let (a, b, c, d) = (draw(dim), draw(dim), draw(dim), draw(dim));
        let (lhs, rhs, scale) = four_point_identity_sides(&a, &b, &c, &d);
        if (lhs - rhs).abs() > 1e-10 * scale.max(1.0) {
            violations.push(IdentityViolation { dim, lhs, rhs });
        }
    }
    violations
}

/// Runs `steps` exact-gradient iterations from `x0` and checks
/// `‖x_t − x_{t−1}‖ ≤ (1 + γL)‖y_{t+1} − y_t‖ + 1e-9` wherever both sides are
/// defined by actual iterates. Returns the number of checks and the violations.
pub fn check_step_bound(
    problem: &CompositeProblem,
    gamma: f64,
    steps: usize,
    x0: DenseVector,
) -> Result<(usize, Vec<StepBoundViolation>)> {
    let l_f = problem.f.lambda;
    let mut state = SolverState::new(problem, x0)?;
    let mut estimator = EstimatorState::new(EstimatorKind::Full, 0);
    let mut checked = 0;
    let mut violations = Vec::new();
    for step in 0..steps {
        let dx = linalg::dist(&state.x, &state.prev_x);
        stos_step(&mut state, problem, &mut estimator, gamma)?;
        if step == 0 {
            continue;
        }
        let bound = (1.0 + gamma * l_f) * linalg::dist(&state.y, &state.prev_y);
        checked += 1;
        if dx > bound + 1e-9 {
            violations.push(StepBoundViolation {
                iter: state.iter - 1,
                dx,
                bound,
            });
        }
    }
    Ok((checked, violations))
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaReport {
    pub identity_checked: usize,
    pub identity_violations: Vec<IdentityViolation>,
    pub step_bound_checked: usize,
    pub step_bound_violations: Vec<StepBoundViolation>,
}

impl LemmaReport {
    pub fn is_clean(&self) -> bool {
        self.identity_violations.is_empty() && self.step_bound_violations.is_empty()
    }
}

/// The four-point inner product identity over `trials` quadruples in each of the dimensions 1, 7 and 50,
/// and the per-step bound along a `steps`-long exact-gradient run from 0.
pub fn check_lemma_identities(
    problem: &CompositeProblem,
    gamma: f64,
    trials: usize,
    steps: usize,
    seed: u64,
) -> Result<LemmaReport> {
    let mut identity_violations = Vec::new();
    for (i, dim) in [1usize, 7, 50].into_iter().enumerate() {
        identity_violations.extend(check_four_point_identity(trials, dim, seed.wrapping_add(i as u64)));
    }
    let (step_bound_checked, step_bound_violations) =
        check_step_bound(problem, gamma, steps, vec![0.0; problem.dim()])?;
    Ok(LemmaReport {
        identity_checked: 3 * trials,
        identity_violations,
        step_bound_checked,
        step_bound_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LeastSquares;
    use crate::projections::{DykstraOptions, MmuMode, MmuSet, Polyhedron, SmoothedDistance};
    use crate::sparse::SparseMatrix;

    fn small_problem() -> CompositeProblem {
        let a = SparseMatrix::from_dense(&[vec![1.0, 0.5], vec![0.2, 2.0], vec![1.0, 1.0]]).unwrap();
        let rows = SparseMatrix::from_dense(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        CompositeProblem::new(
            LeastSquares::new(a, vec![1.0, 3.0, 2.0]).unwrap(),
            SmoothedDistance::new(
                Polyhedron::new(rows, vec![0.5, 2.5]).unwrap(),
                1.5,
                DykstraOptions { tol: 1e-14, max_iter: 100_000 },
            )
            .unwrap(),
            Some(MmuSet::new(0.4, MmuMode::Exact).unwrap()),
        )
        .unwrap()
    }

    /// Straight-line evaluation with dense 2×2 arithmetic and explicit
    /// projections computed by the library's cold path.
    fn dense_oracle(p: &CompositeProblem, s: &SolverState, gamma: f64, c1: f64) -> (f64, f64) {
        let a = [[1.0, 0.5], [0.2, 2.0], [1.0, 1.0]];
        let b = [1.0, 3.0, 2.0];
        let h = |v: &[f64]| -> f64 {
            (0..3)
                .map(|i| {
                    let r = a[i][0] * v[0] + a[i][1] * v[1] - b[i];
                    r * r
                })
                .sum::<f64>()
                / 6.0
        };
        let grad_h = |v: &[f64]| -> [f64; 2] {
            let mut g = [0.0; 2];
            for i in 0..3 {
                let r = a[i][0] * v[0] + a[i][1] * v[1] - b[i];
                g[0] += a[i][0] * r / 3.0;
                g[1] += a[i][1] * r / 3.0;
            }
            g
        };
        let lam = p.f.lambda;
        let py = p.f.project(&s.y).unwrap();
        let pz = p.f.project(&s.z).unwrap();
        let f_y = 0.5 * lam * ((s.y[0] - py[0]).powi(2) + (s.y[1] - py[1]).powi(2));
        let gy = grad_h(&s.y);
        let sq = |u: [f64; 2]| u[0] * u[0] + u[1] * u[1];
        let phi = f_y
            + h(&s.y)
            + sq([s.y[0] - s.x[0], s.y[1] - s.x[1]]) / (2.0 * gamma)
            - sq([s.z[0] - s.x[0], s.z[1] - s.x[1]]) / (2.0 * gamma)
            + gy[0] * (s.z[0] - s.y[0])
            + gy[1] * (s.z[1] - s.y[1])
            - 0.5 * sq([s.z[0] - s.y[0], s.z[1] - s.y[1]])
            + c1 * sq([s.y[0] - s.prev_y[0], s.y[1] - s.prev_y[1]]);
        let gz = grad_h(&s.z);
        let e = [
            (s.y[0] - s.z[0]) / gamma + lam * (s.z[0] - pz[0]) - lam * (s.y[0] - py[0]) + gz[0] - gy[0],
            (s.y[1] - s.z[1]) / gamma + lam * (s.z[1] - pz[1]) - lam * (s.y[1] - py[1]) + gz[1] - gy[1],
        ];
        (phi, sq(e).sqrt())
    }

    #[test]
    fn phi_and_stationarity_match_dense_oracle() {
        let p = small_problem();
        let gamma = 0.3;
        let mut s = SolverState::new(&p, vec![0.1, -0.3]).unwrap();
        let mut e = EstimatorState::new(EstimatorKind::Full, 0);
        for _ in 0..4 {
            stos_step(&mut s, &p, &mut e, gamma).unwrap();
            let (phi, stat) = dense_oracle(&p, &s, gamma, 0.5);
            let got_phi = phi_energy(&s, &p, gamma, 0.5).unwrap();
            let got_stat = stationarity_residual(&s, &p, gamma).unwrap();
            assert!((got_phi - phi).abs() <= 1e-12 * (1.0 + phi.abs()), "{got_phi} vs {phi}");
            assert!((got_stat - stat).abs() <= 1e-12 * (1.0 + stat), "{got_stat} vs {stat}");
        }
    }

    #[test]
    fn phi_collapses_when_z_equals_y() {
        let p = small_problem();
        let mut s = SolverState::new(&p, vec![1.0, 2.0]).unwrap();
        // y = z = y′ = x, inside D and in C
        s.z = s.y.clone();
        let phi = phi_energy(&s, &p, 0.7, 3.0).unwrap();
        let (f_y, _) = p.f.value_grad(&s.y).unwrap();
        assert_eq!(phi, f_y + p.h.value(&s.y).unwrap());
    }

    #[test]
    fn phi_is_linear_in_c1() {
        let p = small_problem();
        let mut s = SolverState::new(&p, vec![0.0, 0.0]).unwrap();
        let mut e = EstimatorState::new(EstimatorKind::Full, 0);
        stos_step(&mut s, &p, &mut e, 0.2).unwrap();
        stos_step(&mut s, &p, &mut e, 0.2).unwrap();
        let base = phi_energy(&s, &p, 0.2, 0.0).unwrap();
        let with = phi_energy(&s, &p, 0.2, 2.5).unwrap();
        let expected = 2.5 * linalg::dist_sq(&s.y, &s.prev_y);
        assert!((with - base - expected).abs() <= 1e-12 * (1.0 + with.abs()));
    }

    #[test]
    fn phi_is_infinite_off_the_mmu_set() {
        let p = small_problem();
        let mut s = SolverState::new(&p, vec![0.0, 0.0]).unwrap();
        s.z = vec![0.1, 0.0];
        assert_eq!(phi_energy(&s, &p, 0.2, 0.5).unwrap(), f64::INFINITY);
    }

    #[test]
    fn stationarity_vanishes_at_unconstrained_minimizer() {
        let a = SparseMatrix::from_dense(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = CompositeProblem::new(
            LeastSquares::new(a, vec![2.0, -1.0]).unwrap(),
            SmoothedDistance::new(Polyhedron::unconstrained(2), 1.0, DykstraOptions::default()).unwrap(),
            None,
        )
        .unwrap();
        let s = SolverState::new(&p, vec![1.0, -1.0]).unwrap();
        assert!(stationarity_residual(&s, &p, 0.5).unwrap() < 1e-10);
    }

    #[test]
    fn four_point_identity_holds_on_random_quadruples() {
        let zero = [0.0; 3];
        let (l, r, _) = four_point_identity_sides(&zero, &zero, &zero, &zero);
        assert_eq!((l, r), (0.0, 0.0));
        assert!(check_four_point_identity(1000, 7, 1).is_empty());
    }

    #[test]
    fn step_bound_holds_on_small_problem() {
        let p = small_problem();
        let (checked, v) = check_step_bound(&p, 0.3, 200, vec![0.0, 0.0]).unwrap();
        assert_eq!(checked, 199);
        assert!(v.is_empty(), "{v:?}");
    }
}
