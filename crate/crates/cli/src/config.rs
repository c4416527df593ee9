//! Run configuration: a JSON file, command-line overrides, and the fully
//! resolved form that is echoed into `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stos::estimators::EstimatorKind;
use stos::problem::{generate_phantom, load_problem, FlashProblem, PhantomSpec};
use stos::projections::{DykstraOptions, MmuMode};
use stos::solver::{estimate_lipschitz, gamma_threshold_unbiased, CompositeProblem, SolverConfig};

pub const DEFAULT_MAX_EPOCHS: usize = 500;
pub const DEFAULT_OUTPUT_DIR: &str = "stos-out";
/// Stochastic estimators default to `N / 8` samples per batch.
pub const DEFAULT_BATCH_DIVISOR: usize = 8;

/// The configuration file as written by the user. Every field is optional;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem_dir: Option<PathBuf>,
    pub phantom: Option<PhantomSpec>,
    pub estimator: Option<String>,
    /// Used by `compare` only.
    pub estimators: Option<Vec<String>>,
    pub batch_size: Option<usize>,
    pub sarah_p: Option<f64>,
    pub svrg_m: Option<usize>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub mmu_mode: Option<MmuMode>,
    pub max_epochs: Option<usize>,
    pub residual_tol: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub record_stride: Option<usize>,
    pub dykstra_tol: Option<f64>,
    pub dykstra_max_iter: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            anyhow::anyhow!("config {}: key `{key}`: {}", path.display(), e.inner())
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }
}

/// Command-line flags that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub estimator: Option<String>,
    pub batch_size: Option<usize>,
    pub gamma: Option<f64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(self, mut c: RunConfig) -> RunConfig {
        if let Some(dir) = self.problem_dir {
            c.problem_dir = Some(dir);
            c.phantom = None;
        }
        c.seed = self.seed.or(c.seed);
        c.estimator = self.estimator.or(c.estimator);
        c.batch_size = self.batch_size.or(c.batch_size);
        c.gamma = self.gamma.or(c.gamma);
        c.max_epochs = self.epochs.or(c.max_epochs);
        c.output_dir = self.out.or(c.output_dir);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    ProblemDir(PathBuf),
    Phantom(PhantomSpec),
}

impl ProblemSource {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        match (&c.problem_dir, &c.phantom) {
            (Some(_), Some(_)) => bail!("config: set only one of `problem_dir` and `phantom`"),
            (Some(dir), None) => Ok(Self::ProblemDir(dir.clone())),
            (None, Some(spec)) => Ok(Self::Phantom(spec.clone())),
            (None, None) => Ok(Self::Phantom(PhantomSpec::default())),
        }
    }

    pub fn load(&self) -> Result<FlashProblem> {
        match self {
            Self::ProblemDir(dir) => {
                load_problem(dir).with_context(|| format!("loading problem from {}", dir.display()))
            }
            Self::Phantom(spec) => generate_phantom(spec).context("generating phantom"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRule {
    Given,
    /// `0.9 ×` the unbiased-estimator threshold.
    Auto,
}

/// Everything a run depends on, with all defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub problem: ProblemSource,
    pub n_samples: usize,
    pub dim: usize,
    pub estimators: Vec<EstimatorKind>,
    pub gamma: f64,
    pub gamma_rule: GammaRule,
    pub gamma_threshold: f64,
    pub lambda: f64,
    pub mmu_mode: MmuMode,
    pub max_epochs: usize,
    pub residual_tol: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub record_stride: usize,
    pub c1: f64,
    pub dykstra: DykstraOptions,
}

pub struct Prepared {
    pub config: ResolvedConfig,
    pub problem: FlashProblem,
    pub composite: CompositeProblem,
}

impl Prepared {
    pub fn solver_config(&self, estimator: EstimatorKind) -> SolverConfig {
        let c = &self.config;
        let mut s = SolverConfig::new(c.gamma, estimator);
        s.max_epochs = c.max_epochs;
        s.residual_tol = c.residual_tol;
        s.seed = c.seed;
        s.c1 = c.c1;
        s.record_stride = c.record_stride;
        s
    }
}

/// Loads the problem and fills in defaults. `names` overrides the estimator
/// list (used by `compare`); otherwise the single `estimator` key applies.
pub fn prepare(c: &RunConfig, names: Option<&[String]>) -> Result<Prepared> {
    let source = ProblemSource::from_config(c)?;
    let problem = source.load()?;
    let n = problem.n_voxels();

    let lambda = c.lambda.unwrap_or(1.0);
    let mmu_mode = c.mmu_mode.unwrap_or_default();
    let defaults = DykstraOptions::default();
    let dykstra = DykstraOptions {
        tol: c.dykstra_tol.unwrap_or(defaults.tol),
        max_iter: c.dykstra_max_iter.unwrap_or(defaults.max_iter),
    };
    let composite = problem.to_composite(lambda, mmu_mode, dykstra)?;

    let single = [c.estimator.clone().unwrap_or_else(|| "full".into())];
    let names = names.unwrap_or(&single);
    let batch = c.batch_size.unwrap_or((n / DEFAULT_BATCH_DIVISOR).max(1));
    let estimators = names
        .iter()
        .map(|name| EstimatorKind::from_name(name, n, Some(batch), c.sarah_p, c.svrg_m))
        .collect::<stos::Result<Vec<_>>>()?;

    let gamma_threshold = gamma_threshold_unbiased(&estimate_lipschitz(&composite));
    let (gamma, gamma_rule) = match c.gamma {
        Some(g) => (g, GammaRule::Given),
        None => (SolverConfig::AUTO_GAMMA_FACTOR * gamma_threshold, GammaRule::Auto),
    };

    let config = ResolvedConfig {
        problem: source,
        n_samples: n,
        dim: problem.n_spots(),
        estimators,
        gamma,
        gamma_rule,
        gamma_threshold,
        lambda,
        mmu_mode,
        max_epochs: c.max_epochs.unwrap_or(DEFAULT_MAX_EPOCHS),
        residual_tol: c.residual_tol.unwrap_or(1e-6),
        seed: c.seed.unwrap_or(0),
        output_dir: c.output_dir.clone().unwrap_or_else(|| DEFAULT_OUTPUT_DIR.into()),
        record_stride: c.record_stride.unwrap_or(1),
        c1: SolverConfig::DEFAULT_C1,
        dykstra,
    };
    for kind in &config.estimators {
        let prepared_cfg = {
            let mut s = SolverConfig::new(config.gamma, *kind);
            s.record_stride = config.record_stride;
            s.residual_tol = config.residual_tol;
            s
        };
        prepared_cfg.validate(n)?;
    }
    Ok(Prepared {
        config,
        problem,
        composite,
    })
}
