//! Stochastic estimators of `∇H` for the finite sum in [`LeastSquares`].
//!
//! Every estimator is driven through [`EstimatorState::estimate_gradient`], which
//! returns the estimate and applies the estimator's own state update in the same
//! call (table writes for SAGA/SAG, the recursion for SARAH, the inner-loop
//! counter for SVRG).
//!
//! Per-sample gradients of `hᵢ = ½(⟨Aᵢ, x⟩ − bᵢ)²` are `Aᵢ·rᵢ`, so the SAGA/SAG
//! gradient table and the SVRG anchor are stored as one residual scalar per
//! sample. The dense gradient is reconstructed from row `i` of `A` on demand.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, DenseVector};
use crate::objective::LeastSquares;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Exact `∇H`.
    Full,
    Sgd { batch: usize },
    Saga { batch: usize },
    /// `p` is the restart parameter: a full gradient is taken with probability `1/p`.
    Sarah { batch: usize, p: f64 },
    Sag { batch: usize },
    /// The anchor point is refreshed every `inner_m` calls.
    Svrg { batch: usize, inner_m: usize },
}

pub const ESTIMATOR_NAMES: [&str; 6] = ["full", "sgd", "saga", "sarah", "sag", "svrg"];

impl EstimatorKind {
    /// Builds an estimator from its name. Missing hyperparameters default to
    /// `batch = N`, `p = N/b` (at least 2) and `inner_m = N/b` (at least 1).
    pub fn from_name(
        name: &str,
        n_samples: usize,
        batch: Option<usize>,
        sarah_p: Option<f64>,
        svrg_m: Option<usize>,
    ) -> Result<Self> {
        let b = batch.unwrap_or(n_samples);
        let epoch_calls = if b == 0 { 1 } else { (n_samples / b).max(1) };
        let kind = match name.to_ascii_lowercase().as_str() {
            "full" => EstimatorKind::Full,
            "sgd" => EstimatorKind::Sgd { batch: b },
            "saga" => EstimatorKind::Saga { batch: b },
            "sarah" => EstimatorKind::Sarah {
                batch: b,
                p: sarah_p.unwrap_or((epoch_calls as f64).max(2.0)),
            },
            "sag" => EstimatorKind::Sag { batch: b },
            "svrg" => EstimatorKind::Svrg {
                batch: b,
                inner_m: svrg_m.unwrap_or(epoch_calls),
            },
            other => {
                return Err(Error::Invalid {
                    field: "estimator",
                    msg: format!(
                        "unknown estimator `{other}`; valid names: {}",
                        ESTIMATOR_NAMES.join(", ")
                    ),
                })
            }
        };
        kind.validate(n_samples)?;
        Ok(kind)
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Full => "full",
            EstimatorKind::Sgd { .. } => "sgd",
            EstimatorKind::Saga { .. } => "saga",
            EstimatorKind::Sarah { .. } => "sarah",
            EstimatorKind::Sag { .. } => "sag",
            EstimatorKind::Svrg { .. } => "svrg",
        }
    }

    pub fn batch_size(&self) -> Option<usize> {
        match *self {
            EstimatorKind::Full => None,
            EstimatorKind::Sgd { batch }
            | EstimatorKind::Saga { batch }
            | EstimatorKind::Sarah { batch, .. }
            | EstimatorKind::Sag { batch }
            | EstimatorKind::Svrg { batch, .. } => Some(batch),
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if let Some(b) = self.batch_size() {
            if b == 0 || b > n_samples {
                return Err(Error::Invalid {
                    field: "batch_size",
                    msg: format!("batch size {b} must lie in 1..={n_samples}"),
                });
            }
        }
        match *self {
            EstimatorKind::Sarah { p, .. } if !(p > 1.0 && p.is_finite()) => Err(Error::Invalid {
                field: "sarah_p",
                msg: format!("restart parameter must be > 1, got {p}"),
            }),
            EstimatorKind::Svrg { inner_m: 0, .. } => Err(Error::Invalid {
                field: "svrg_m",
                msg: "inner loop length must be >= 1".into(),
            }),
            _ => Ok(()),
        }
    }
}

/// Distinct sample indices `J_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Output of one estimator call together with its oracle cost, counted in
/// per-sample gradient evaluations.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub gradient: DenseVector,
    pub cost: usize,
}

/// Per-sample gradient memory `∇hᵢ(φᵢ) = Aᵢ·sᵢ` plus its cached mean.
#[derive(Debug, Clone)]
struct GradientTable {
    coeffs: Vec<f64>,
    mean: DenseVector,
    writes_since_rebuild: usize,
}

impl GradientTable {
    fn at(h: &LeastSquares, x: &[f64]) -> Self {
        let coeffs: Vec<f64> = (0..h.n_samples()).map(|i| h.residual(i, x)).collect();
        let mean = table_mean(h, &coeffs);
        Self {
            coeffs,
            mean,
            writes_since_rebuild: 0,
        }
    }

    fn write(&mut self, h: &LeastSquares, i: usize, coeff: f64) {
        let delta = coeff - self.coeffs[i];
        if delta != 0.0 {
            h.matrix()
                .add_scaled_row(i, delta / h.n_samples() as f64, &mut self.mean);
        }
        self.coeffs[i] = coeff;
        self.writes_since_rebuild += 1;
        if self.writes_since_rebuild >= h.n_samples() {
            self.mean = table_mean(h, &self.coeffs);
            self.writes_since_rebuild = 0;
        }
    }
}

fn table_mean(h: &LeastSquares, coeffs: &[f64]) -> DenseVector {
    let mut mean = vec![0.0; h.dim()];
    let inv_n = 1.0 / h.n_samples() as f64;
    for (i, &s) in coeffs.iter().enumerate() {
        if s != 0.0 {
            h.matrix().add_scaled_row(i, s * inv_n, &mut mean);
        }
    }
    mean
}

#[derive(Debug, Clone)]
struct SvrgAnchor {
    point: DenseVector,
    residuals: Vec<f64>,
    full_grad: DenseVector,
}

#[derive(Debug, Clone)]
struct SarahMemory {
    prev_point: DenseVector,
    prev_estimate: DenseVector,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    kind: EstimatorKind,
    rng: ChaCha8Rng,
    n_samples: Option<usize>,
    table: Option<GradientTable>,
    anchor: Option<SvrgAnchor>,
    sarah: Option<SarahMemory>,
    inner_counter: usize,
    calls: usize,
    total_cost: usize,
    restarts: usize,
}

impl EstimatorState {
    pub fn new(kind: EstimatorKind, seed: u64) -> Self {
        Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            n_samples: None,
            table: None,
            anchor: None,
            sarah: None,
            inner_counter: 0,
            calls: 0,
            total_cost: 0,
            restarts: 0,
        }
    }

    pub fn kind(&self) -> &EstimatorKind {
        &self.kind
    }

    /// Number of `estimate_gradient` calls so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    /// Cumulative per-sample gradient evaluations, including initialization.
    pub fn total_cost(&self) -> usize {
        self.total_cost
    }

    /// Number of full-gradient restarts (SARAH) or anchor refreshes (SVRG).
    pub fn restarts(&self) -> usize {
        self.restarts
    }

    /// Draws `b` distinct indices uniformly from `0..n` (b-nice sampling).
    pub fn sample_batch(&mut self, n: usize) -> Result<Batch> {
        let b = self.kind.batch_size().unwrap_or(n);
        if b > n {
            return Err(Error::Invalid {
                field: "batch_size",
                msg: format!("batch size {b} exceeds sample count {n}"),
            });
        }
        Ok(Batch {
            indices: index::sample(&mut self.rng, n, b).into_vec(),
        })
    }

    fn bind(&mut self, h: &LeastSquares, x: &[f64]) -> Result<()> {
        check_len("estimator point", h.dim(), x.len())?;
        match self.n_samples {
            Some(n) => check_len("estimator sample count", n, h.n_samples()),
            None => {
                self.kind.validate(h.n_samples())?;
                self.n_samples = Some(h.n_samples());
                Ok(())
            }
        }
    }

    /// Initializes the estimator memory at `x0` with one full pass: the SAGA/SAG
    /// table, the SVRG anchor, or the SARAH `t = 0` estimate. Returns the
    /// oracle cost (0 for Full and SGD). Calling [`estimate_gradient`] on a
    /// fresh state performs the same initialization lazily at its first point.
    ///
    /// [`estimate_gradient`]: EstimatorState::estimate_gradient
    pub fn initialize(&mut self, h: &LeastSquares, x0: &[f64]) -> Result<usize> {
        self.bind(h, x0)?;
        let n = h.n_samples();
        let cost = match self.kind {
            EstimatorKind::Full | EstimatorKind::Sgd { .. } => 0,
            EstimatorKind::Saga { .. } | EstimatorKind::Sag { .. } => {
                self.table = Some(GradientTable::at(h, x0));
                n
            }
            EstimatorKind::Svrg { .. } => {
                self.anchor = Some(svrg_anchor(h, x0));
                self.inner_counter = 0;
                n
            }
            EstimatorKind::Sarah { .. } => {
                self.sarah = Some(SarahMemory {
                    prev_point: x0.to_vec(),
                    prev_estimate: h.full_gradient(x0)?,
                });
                n
            }
        };
        self.total_cost += cost;
        Ok(cost)
    }

    pub fn estimate_gradient(&mut self, h: &LeastSquares, x: &[f64]) -> Result<GradientEstimate> {
        self.bind(h, x)?;
        let n = h.n_samples();
        let estimate = match self.kind {
            EstimatorKind::Full => GradientEstimate {
                gradient: h.full_gradient(x)?,
                cost: n,
            },
            EstimatorKind::Sgd { batch } => {
                let j = self.sample_batch(n)?;
                let mut g = vec![0.0; h.dim()];
                let inv_b = 1.0 / batch as f64;
                for &i in &j.indices {
                    h.matrix().add_scaled_row(i, h.residual(i, x) * inv_b, &mut g);
                }
                GradientEstimate {
                    gradient: g,
                    cost: batch,
                }
            }
            EstimatorKind::Saga { batch } | EstimatorKind::Sag { batch } => {
                let weight = match self.kind {
                    EstimatorKind::Saga { .. } => 1.0 / batch as f64,
                    _ => 1.0 / n as f64,
                };
                if self.table.is_none() {
                    // φ = x for every sample: the correction terms vanish and
                    // the estimate is the exact mean of the fresh table.
                    let table = GradientTable::at(h, x);
                    let g = table.mean.clone();
                    self.table = Some(table);
                    GradientEstimate { gradient: g, cost: n }
                } else {
                    let j = self.sample_batch(n)?;
                    let table = self.table.as_mut().unwrap();
                    let fresh: Vec<f64> = j.indices.iter().map(|&i| h.residual(i, x)).collect();
                    let mut g = table.mean.clone();
                    for (&i, &r) in j.indices.iter().zip(&fresh) {
                        let diff = r - table.coeffs[i];
                        if diff != 0.0 {
                            h.matrix().add_scaled_row(i, diff * weight, &mut g);
                        }
                    }
                    for (&i, &r) in j.indices.iter().zip(&fresh) {
                        table.write(h, i, r);
                    }
                    GradientEstimate {
                        gradient: g,
                        cost: batch,
                    }
                }
            }
            EstimatorKind::Sarah { batch, p } => {
                let restart = match self.sarah {
                    None => true,
                    // p_t = 0 with probability 1/p
                    Some(_) => self.rng.gen_bool(1.0 / p),
                };
                if restart {
                    let g = h.full_gradient(x)?;
                    if self.sarah.is_some() {
                        self.restarts += 1;
                    }
                    self.sarah = Some(SarahMemory {
                        prev_point: x.to_vec(),
                        prev_estimate: g.clone(),
                    });
                    GradientEstimate { gradient: g, cost: n }
                } else {
                    let j = self.sample_batch(n)?;
                    let mem = self.sarah.as_mut().unwrap();
                    let mut g = mem.prev_estimate.clone();
                    let inv_b = 1.0 / batch as f64;
                    for &i in &j.indices {
                        let diff = h.residual(i, x) - h.residual(i, &mem.prev_point);
                        if diff != 0.0 {
                            h.matrix().add_scaled_row(i, diff * inv_b, &mut g);
                        }
                    }
                    mem.prev_point.copy_from_slice(x);
                    mem.prev_estimate.copy_from_slice(&g);
                    GradientEstimate {
                        gradient: g,
                        cost: batch,
                    }
                }
            }
            EstimatorKind::Svrg { batch, inner_m } => {
                let mut cost = batch;
                if self.anchor.is_none() || self.inner_counter >= inner_m {
                    if self.anchor.is_some() {
                        self.restarts += 1;
                    }
                    self.anchor = Some(svrg_anchor(h, x));
                    self.inner_counter = 0;
                    cost += n;
                }
                self.inner_counter += 1;
                let j = self.sample_batch(n)?;
                let anchor = self.anchor.as_ref().unwrap();
                let mut g = anchor.full_grad.clone();
                let inv_b = 1.0 / batch as f64;
                for &i in &j.indices {
                    let diff = h.residual(i, x) - anchor.residuals[i];
                    if diff != 0.0 {
                        h.matrix().add_scaled_row(i, diff * inv_b, &mut g);
                    }
                }
                GradientEstimate { gradient: g, cost }
            }
        };
        self.calls += 1;
        self.total_cost += estimate.cost;
        Ok(estimate)
    }

    /// Cached table mean and the exactly recomputed one, for SAGA/SAG states
    /// that have been initialized.
    pub fn table_means(&self, h: &LeastSquares) -> Option<(DenseVector, DenseVector)> {
        self.table
            .as_ref()
            .map(|t| (t.mean.clone(), table_mean(h, &t.coeffs)))
    }

    /// SVRG anchor point `φ_s`, if set.
    pub fn anchor_point(&self) -> Option<&[f64]> {
        self.anchor.as_ref().map(|a| a.point.as_slice())
    }
}

fn svrg_anchor(h: &LeastSquares, x: &[f64]) -> SvrgAnchor {
    let residuals: Vec<f64> = (0..h.n_samples()).map(|i| h.residual(i, x)).collect();
    let full_grad = table_mean(h, &residuals);
    SvrgAnchor {
        point: x.to_vec(),
        residuals,
        full_grad,
    }
}

/// `∇H(x)`, the exact gradient the estimators are measured against.
pub fn full_gradient(h: &LeastSquares, x: &[f64]) -> Result<DenseVector> {
    h.full_gradient(x)
}

/// Monte-Carlo summary of an estimator at a fixed point.
#[derive(Debug, Clone, Copy)]
pub struct BiasReport {
    /// `‖mean(estimates) − ∇H(x)‖`
    pub bias_norm: f64,
    /// `mean ‖estimate − ∇H(x)‖²`
    pub mse: f64,
    /// Three standard errors of the sample mean, `3·sqrt(tr Σ̂ / trials)`, with
    /// `Σ̂` the unbiased sample covariance of the estimates.
    pub mc_bound: f64,
    pub trials: usize,
}

/// Draws one estimate from each of `trials` states produced by `factory`
/// (called with the trial number) and compares them to the exact gradient.
pub fn empirical_bias_mse<F>(
    mut factory: F,
    h: &LeastSquares,
    x: &[f64],
    trials: usize,
) -> Result<BiasReport>
where
    F: FnMut(usize) -> Result<EstimatorState>,
{
    if trials < 2 {
        return Err(Error::Invalid {
            field: "trials",
            msg: "need at least 2 trials".into(),
        });
    }
    let exact = h.full_gradient(x)?;
    let d = exact.len();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut mse = 0.0;
    for trial in 0..trials {
        let mut state = factory(trial)?;
        let est = state.estimate_gradient(h, x)?.gradient;
        for k in 0..d {
            let e = est[k] - exact[k];
            sum[k] += e;
            sum_sq[k] += e * e;
        }
        mse += linalg::dist_sq(&est, &exact);
    }
    let t = trials as f64;
    let mean_err: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let trace_cov: f64 = (0..d)
        .map(|k| ((sum_sq[k] - t * mean_err[k] * mean_err[k]) / (t - 1.0)).max(0.0))
        .sum();
    Ok(BiasReport {
        bias_norm: linalg::norm(&mean_err),
        mse: mse / t,
        mc_bound: 3.0 * (trace_cov / t).sqrt(),
        trials,
    })
}
