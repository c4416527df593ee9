use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stos::estimators::EstimatorKind;
use stos::metrics::{plan_curves, MetricsReport};
use stos::problem::{generate_phantom, load_problem, read_vector, save_problem, write_vector, FlashProblem};
use stos::projections::{project_mmu, MmuMode, MmuSet};
use stos::solver::{history_csv, run, IterationRecord, RunOutput, StopReason};

use crate::config::{prepare, Prepared, ResolvedConfig, RunConfig};

pub const EXIT_CONVERGED: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_BUDGET: u8 = 2;

/// Writes through a sibling temporary file and a rename so that readers never
/// see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_vector_atomic(path: &Path, v: &[f64]) -> Result<()> {
    let tmp = tmp_path(path);
    write_vector(v, &tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn generate(config: RunConfig, seed: Option<u64>, n_voxels: Option<usize>, n_spots: Option<usize>, out: &Path) -> Result<ExitCode> {
    if config.problem_dir.is_some() {
        bail!("generate builds a phantom; `problem_dir` does not apply");
    }
    let mut spec = config.phantom.unwrap_or_default();
    spec.seed = seed.unwrap_or(spec.seed);
    spec.n_voxels = n_voxels.unwrap_or(spec.n_voxels);
    spec.n_spots = n_spots.unwrap_or(spec.n_spots);
    let p = generate_phantom(&spec)?;
    save_problem(&p, out)?;
    println!(
        "wrote {}: {} voxels x {} spots, nnz(A) = {}, {} ROI rows",
        out.display(),
        p.n_voxels(),
        p.n_spots(),
        p.a_matrix.nnz(),
        p.b_roi.n_rows()
    );
    for (name, mask) in &p.structures {
        println!("  {name}: {} voxels", mask.len());
    }
    Ok(ExitCode::from(EXIT_CONVERGED))
}

#[derive(Debug, Serialize)]
struct SolveSummary<'a> {
    version: &'static str,
    estimator: &'static str,
    converged: bool,
    stop: StopReason,
    iterations: usize,
    grad_evals: usize,
    epochs: f64,
    /// `(1/2N)‖Ax − b‖²` at the final weights.
    final_objective: f64,
    /// `F + H` at the final weights.
    final_penalized_objective: f64,
    residual: f64,
    residual_threshold: f64,
    wall_time_s: f64,
    metrics: MetricsReport,
    config: &'a ResolvedConfig,
}

/// Snaps the iterate onto the MMU set with the exact projection.
fn deliverable_weights(p: &FlashProblem, z: &[f64]) -> Result<Vec<f64>> {
    Ok(project_mmu(&MmuSet::new(p.alpha, MmuMode::Exact)?, z))
}

pub fn solve(config: RunConfig) -> Result<ExitCode> {
    let prepared = prepare(&config, None)?;
    let kind = prepared.config.estimators[0];
    let dir = prepared.config.output_dir.clone();
    create_dir(&dir)?;

    let started = Instant::now();
    let out = run(&prepared.composite, &prepared.solver_config(kind))?;
    let wall = started.elapsed().as_secs_f64();

    let x = deliverable_weights(&prepared.problem, &out.state.z)?;
    let summary = SolveSummary {
        version: stos::VERSION,
        estimator: kind.name(),
        converged: out.converged(),
        stop: out.stop,
        iterations: out.state.iter,
        grad_evals: out.state.grad_evals,
        epochs: out.state.grad_evals as f64 / prepared.config.n_samples as f64,
        final_objective: prepared.problem.objective_value(&x)?,
        final_penalized_objective: prepared.composite.smooth_value(&x)?,
        residual: out.state.residual(),
        residual_threshold: prepared.config.residual_tol * (1.0 + stos::linalg::norm(&out.state.x)),
        wall_time_s: wall,
        metrics: MetricsReport::evaluate(&prepared.problem, &x)?,
        config: &prepared.config,
    };
    write_atomic(&dir.join("history.csv"), history_csv(&out.history).as_bytes())?;
    write_vector_atomic(&dir.join("final_x.vec"), &x)?;
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{}: {:?} after {} iterations ({:.2} epochs), objective {:.6e}, residual {:.3e}",
        kind.name(),
        out.stop,
        out.state.iter,
        summary.epochs,
        summary.final_objective,
        summary.residual
    );
    Ok(ExitCode::from(if out.converged() { EXIT_CONVERGED } else { EXIT_BUDGET }))
}

/// Lowercase `[a-z0-9_-]` form of a structure name for use in file names.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| match c {
            'a'..='z' | '0'..='9' | '_' | '-' => c,
            'A'..='Z' => c.to_ascii_lowercase(),
            _ => '_',
        })
        .collect()
}

pub fn metrics(problem_dir: &Path, x_file: &Path, out: &Path) -> Result<ExitCode> {
    let p = load_problem(problem_dir)?;
    let x = read_vector(x_file)?;
    if x.len() != p.n_spots() {
        bail!(
            "{} has {} weights but the problem has {} spots",
            x_file.display(),
            x.len(),
            p.n_spots()
        );
    }
    let mut stems: BTreeMap<String, &str> = BTreeMap::new();
    for name in p.structures.keys() {
        let stem = file_stem(name);
        if let Some(other) = stems.insert(stem.clone(), name) {
            bail!("structure names `{other}` and `{name}` both map to dvh_{stem}.csv");
        }
    }
    let report = MetricsReport::evaluate(&p, &x)?;
    let curves = plan_curves(&p, &x)?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    for (name, curve) in &curves.dvh {
        write_atomic(&out.join(format!("dvh_{}.csv", file_stem(name))), curve.to_csv().as_bytes())?;
    }
    write_atomic(&out.join("drvh_roi.csv"), curves.drvh_roi.to_csv().as_bytes())?;
    println!(
        "CI {:.4}, P_d {:.1}%, P_dr {:.1}%",
        report.ci, report.p_d, report.p_dr
    );
    Ok(ExitCode::from(EXIT_CONVERGED))
}

#[derive(Debug, Serialize)]
struct RankEntry {
    rank: usize,
    label: String,
    estimator: EstimatorKind,
    final_objective: f64,
    epochs: f64,
    iterations: usize,
    stop: StopReason,
}

#[derive(Debug, Serialize)]
struct Failure {
    label: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct CompareSummary<'a> {
    version: &'static str,
    ranking: Vec<RankEntry>,
    failures: Vec<Failure>,
    config: &'a ResolvedConfig,
}

/// Unique column labels: the estimator name, suffixed with its position when
/// the same name appears more than once.
fn labels(kinds: &[EstimatorKind]) -> Vec<String> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, k)| {
            if kinds.iter().filter(|o| o.name() == k.name()).count() > 1 {
                format!("{}_{}", k.name(), i + 1)
            } else {
                k.name().to_string()
            }
        })
        .collect()
}

/// Objective on the integer epoch grid `0..=max_epochs`: the last recorded
/// value at or before each epoch, the starting value before the first record.
fn epoch_column(history: &[IterationRecord], start: f64, max_epochs: usize) -> Vec<f64> {
    let mut col = Vec::with_capacity(max_epochs + 1);
    let mut k = 0;
    let mut current = start;
    for e in 0..=max_epochs {
        while k < history.len() && history[k].epoch <= e as f64 + 1e-9 {
            current = history[k].objective;
            k += 1;
        }
        col.push(current);
    }
    col
}

pub fn compare(config: RunConfig, names: Option<Vec<String>>) -> Result<ExitCode> {
    let names = names
        .or_else(|| config.estimators.clone())
        .context("compare needs an estimator list (`estimators` key or --estimators)")?;
    if names.len() < 2 {
        bail!("compare needs at least two estimators, got {}", names.len());
    }
    let prepared = prepare(&config, Some(&names))?;
    let dir = prepared.config.output_dir.clone();
    create_dir(&dir)?;
    let kinds = prepared.config.estimators.clone();
    let labels = labels(&kinds);

    let results: Vec<stos::Result<RunOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = kinds
            .iter()
            .map(|&kind| {
                let prepared: &Prepared = &prepared;
                s.spawn(move || run(&prepared.composite, &prepared.solver_config(kind)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
    });

    let start = prepared.composite.smooth_value(&vec![0.0; prepared.composite.dim()])?;
    let max_epochs = prepared.config.max_epochs;
    let mut columns = Vec::new();
    let mut ranking = Vec::new();
    let mut failures = Vec::new();
    for ((label, kind), result) in labels.iter().zip(&kinds).zip(results) {
        match result {
            Ok(out) => {
                write_atomic(
                    &dir.join(format!("history_{label}.csv")),
                    history_csv(&out.history).as_bytes(),
                )?;
                columns.push((label.clone(), epoch_column(&out.history, start, max_epochs)));
                ranking.push(RankEntry {
                    rank: 0,
                    label: label.clone(),
                    estimator: *kind,
                    final_objective: out.history.last().map_or(start, |r| r.objective),
                    epochs: out.state.grad_evals as f64 / prepared.config.n_samples as f64,
                    iterations: out.state.iter,
                    stop: out.stop,
                });
            }
            Err(e) => {
                eprintln!("error: {label}: {e}");
                failures.push(Failure {
                    label: label.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    ranking.sort_by(|a, b| a.final_objective.total_cmp(&b.final_objective));
    for (i, r) in ranking.iter_mut().enumerate() {
        r.rank = i + 1;
    }

    let mut csv = String::from("epoch");
    for (label, _) in &columns {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');
    for e in 0..=max_epochs {
        csv.push_str(&e.to_string());
        for (_, col) in &columns {
            csv.push_str(&format!(",{:e}", col[e]));
        }
        csv.push('\n');
    }
    write_atomic(&dir.join("compare.csv"), csv.as_bytes())?;
    for r in &ranking {
        println!("{}. {:<8} objective {:.6e} ({:?})", r.rank, r.label, r.final_objective, r.stop);
    }
    let failed = !failures.is_empty();
    write_json(
        &dir.join("compare_summary.json"),
        &CompareSummary {
            version: stos::VERSION,
            ranking,
            failures,
            config: &prepared.config,
        },
    )?;
    Ok(ExitCode::from(if failed { EXIT_ERROR } else { EXIT_CONVERGED }))
}
