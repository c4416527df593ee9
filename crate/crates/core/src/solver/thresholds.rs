//! Step-size conditions for the splitting. `Λ(γ)` governs the unbiased-estimator
//! rate bound and `Λ₁(γ)` the energy decrease with variance-reduced estimators;
//! both must be positive for the corresponding guarantee.

use serde::{Deserialize, Serialize};

use super::CompositeProblem;

/// `l_f`: Lipschitz constant of `∇F`. `weak_convexity`: some `l` with
/// `F + (l/2)‖·‖²` convex. `beta`: largest per-sample gradient Lipschitz
/// constant of `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub l_f: f64,
    pub weak_convexity: f64,
    pub beta: f64,
}

/// Stand-ins for the variance-reduction constants `V₁`, `V_Υ` and `ρ`, which
/// exist for SAGA/SARAH/SAG/SVRG but have no closed form for a given problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSurrogates {
    pub v1: f64,
    pub v_upsilon: f64,
    pub rho: f64,
}

impl VarianceSurrogates {
    /// All variance terms zero, as for the exact gradient.
    pub fn deterministic() -> Self {
        Self {
            v1: 0.0,
            v_upsilon: 0.0,
            rho: 1.0,
        }
    }

    fn penalty(&self) -> f64 {
        (5.0 * self.v1 * self.rho + 5.0 * self.v_upsilon) / self.rho
    }
}

/// `L = λ` (exact for the smoothed squared distance), `l = 0` (it is convex),
/// `β = maxᵢ ‖Aᵢ‖²`.
pub fn estimate_lipschitz(problem: &CompositeProblem) -> LipschitzConstants {
    LipschitzConstants {
        l_f: problem.f.lambda,
        weak_convexity: 0.0,
        beta: problem.h.max_sample_lipschitz(),
    }
}

/// `Λ(γ) = (1 − γ(1 + l + 2β)) / (2γ) − (3γ + 2)(γL² + 2l + 2L) / 2`
pub fn lambda_gamma(k: &LipschitzConstants, gamma: f64) -> f64 {
    let (big_l, l, beta) = (k.l_f, k.weak_convexity, k.beta);
    (1.0 - gamma * (1.0 + l + 2.0 * beta)) / (2.0 * gamma)
        - (3.0 * gamma + 2.0) * (gamma * big_l * big_l + 2.0 * l + 2.0 * big_l) / 2.0
}

/// `min{1/L, (6L² + (2β + 5l + 10)L + 6l) / (2L)}`
pub fn gamma_threshold_unbiased(k: &LipschitzConstants) -> f64 {
    let (big_l, l, beta) = (k.l_f, k.weak_convexity, k.beta);
    let second = (6.0 * big_l * big_l + (2.0 * beta + 5.0 * l + 10.0) * big_l + 6.0 * l) / (2.0 * big_l);
    (1.0 / big_l).min(second)
}

/// `K = (1 + l + 2β)/2 + (5V₁ρ + 5V_Υ)/ρ + C₁`
pub fn k_constant(k: &LipschitzConstants, vr: &VarianceSurrogates, c1: f64) -> f64 {
    (1.0 + k.weak_convexity + 2.0 * k.beta) / 2.0 + vr.penalty() + c1
}

/// `Λ₁(γ)` of the energy-decrease condition.
pub fn lambda1_gamma(k: &LipschitzConstants, gamma: f64, vr: &VarianceSurrogates, c1: f64) -> f64 {
    let (big_l, l, beta) = (k.l_f, k.weak_convexity, k.beta);
    let growth = 1.0 + gamma * big_l;
    (1.0 - gamma * (1.0 + l + 2.0 * beta) - 2.0 * gamma * c1) / (2.0 * gamma)
        - vr.penalty()
        - (3.0 * gamma + 2.0) / (2.0 * gamma) * ((-1.0 + 2.0 * gamma * l) + growth * growth)
        - growth * growth
}

/// `𝒯_γ`, the positive root bounding the admissible step for `Λ₁`.
pub fn t_gamma(k: &LipschitzConstants, vr: &VarianceSurrogates, c1: f64) -> f64 {
    let big_l = k.l_f;
    let kk = k_constant(k, vr, c1);
    let lin = 2.0 * kk + (6.0 + 4.0 * big_l) * (k.weak_convexity / big_l + 1.0) + 8.0;
    (-lin + (lin * lin + 12.0 * big_l + 8.0 * big_l * big_l).sqrt()) / (6.0 * big_l + 4.0 * big_l * big_l)
}

/// `min{1/L, 𝒯_γ}`
pub fn gamma_threshold_vr(k: &LipschitzConstants, vr: &VarianceSurrogates, c1: f64) -> f64 {
    (1.0 / k.l_f).min(t_gamma(k, vr, c1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> LipschitzConstants {
        LipschitzConstants {
            l_f: 1.0,
            weak_convexity: 0.0,
            beta: 1.0,
        }
    }

    #[test]
    fn lambda_gamma_hand_value() {
        // (1 − 0.03)/0.02 − 2.03·2.01/2
        let v = lambda_gamma(&unit(), 0.01);
        assert!((v - 46.45985).abs() < 1e-12, "{v}");
    }

    #[test]
    fn unbiased_threshold_hand_value() {
        // min{1, (6 + 12 + 0)/2}
        assert_eq!(gamma_threshold_unbiased(&unit()), 1.0);
        let k = LipschitzConstants {
            l_f: 4.0,
            weak_convexity: 0.0,
            beta: 1.0,
        };
        assert_eq!(gamma_threshold_unbiased(&k), 0.25);
    }

    #[test]
    fn lambda_positive_on_small_steps() {
        let k = LipschitzConstants {
            l_f: 1.0,
            weak_convexity: 1.0,
            beta: 1.0,
        };
        let upper = gamma_threshold_unbiased(&k).min(0.05);
        for i in 1..=500 {
            let gamma = upper * i as f64 / 500.0;
            assert!(lambda_gamma(&k, gamma) > 0.0, "gamma = {gamma}");
        }
    }

    #[test]
    fn lambda1_examples() {
        let vr = VarianceSurrogates::deterministic();
        let v = lambda1_gamma(&unit(), 0.01, &vr, 0.5);
        // 48 − 101.5·0.0201 − 1.0201
        assert!((v - 44.93975).abs() < 1e-10, "{v}");
        assert!(v > 0.0);
        assert!(lambda1_gamma(&unit(), 1e-4, &vr, 0.5) > lambda1_gamma(&unit(), 1e-2, &vr, 0.5));
    }

    #[test]
    fn k_constant_reduces_without_variance() {
        let vr = VarianceSurrogates::deterministic();
        assert_eq!(k_constant(&unit(), &vr, 0.0), 1.5);
        let noisy = VarianceSurrogates {
            v1: 1.0,
            v_upsilon: 2.0,
            rho: 0.5,
        };
        // (5·1·0.5 + 5·2)/0.5 = 25
        assert_eq!(k_constant(&unit(), &noisy, 0.25), 1.5 + 25.0 + 0.25);
    }

    #[test]
    fn vr_threshold_is_admissible() {
        let vr = VarianceSurrogates::deterministic();
        let t = gamma_threshold_vr(&unit(), &vr, 0.5);
        assert!(t > 0.0 && t <= 1.0);
        for i in 1..100 {
            let gamma = t * i as f64 / 100.0;
            assert!(lambda1_gamma(&unit(), gamma, &vr, 0.5) > 0.0, "gamma = {gamma}");
        }
    }
}
