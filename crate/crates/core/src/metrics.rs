//! Plan-quality metrics: dose and dose-rate per voxel, DVH / DRVH curves,
//! conformity index, ROI coverage and per-structure dose statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::DenseVector;
use crate::problem::{FlashProblem, TARGET};

/// Below this ROI dose (Gy) the dose rate is reported as 0.
pub const DOSE_FLOOR: f64 = 1e-9;
/// Number of uniform bins in the default DVH / DRVH grids.
pub const DEFAULT_BINS: usize = 256;

/// `Ax`
pub fn dose_vector(p: &FlashProblem, x: &[f64]) -> Result<DenseVector> {
    p.a_matrix.spmv(x)
}

/// `Bx`
pub fn roi_dose_vector(p: &FlashProblem, x: &[f64]) -> Result<DenseVector> {
    p.b_roi.spmv(x)
}

/// Per ROI voxel `r_j = α·((B∘B)x)_j / (t·(Bx)_j)`, the rate implied by the
/// dose-rate constraint; `r_j = 0` when `(Bx)_j ≤` [`DOSE_FLOOR`].
pub fn dose_rate_vector(p: &FlashProblem, x: &[f64]) -> Result<DenseVector> {
    check_len("spot weights", p.n_spots(), x.len())?;
    let scale = p.alpha / p.t_min;
    Ok((0..p.b_roi.n_rows())
        .map(|j| {
            let (cols, vals) = p.b_roi.row(j);
            let (mut lin, mut sq) = (0.0, 0.0);
            for (&c, &v) in cols.iter().zip(vals) {
                lin += v * x[c];
                sq += v * v * x[c];
            }
            if lin <= DOSE_FLOOR {
                0.0
            } else {
                scale * sq / lin
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramCurve {
    pub bin_edges: Vec<f64>,
    /// Fraction of the structure at or above each edge.
    pub volume_fraction: Vec<f64>,
}

impl HistogramCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("edge,fraction\n");
        for (e, f) in self.bin_edges.iter().zip(&self.volume_fraction) {
            writeln!(out, "{e:e},{f:e}").unwrap();
        }
        out
    }
}

/// `bins` equal bins on `[0, upper]`, returned as `bins + 1` edges.
pub fn uniform_edges(upper: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|k| upper * k as f64 / bins as f64).collect()
}

fn masked<'a>(values: &'a [f64], mask: &'a [usize], what: &'static str) -> Result<impl Iterator<Item = f64> + 'a> {
    if mask.is_empty() {
        return Err(Error::Invalid {
            field: "mask",
            msg: format!("empty structure for {what}"),
        });
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= values.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: values.len(),
        });
    }
    Ok(mask.iter().map(move |&i| values[i]))
}

/// Survival curve of `values` over `mask`: for each edge the fraction of
/// masked voxels with value `≥` the edge.
pub fn histogram_curve(values: &[f64], mask: &[usize], edges: &[f64]) -> Result<HistogramCurve> {
    let mut sorted: Vec<f64> = masked(values, mask, "histogram")?.collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let volume_fraction = edges
        .iter()
        .map(|&e| {
            let below = sorted.partition_point(|&v| v < e);
            (sorted.len() - below) as f64 / n
        })
        .collect();
    Ok(HistogramCurve {
        bin_edges: edges.to_vec(),
        volume_fraction,
    })
}

pub fn dvh_curve(dose: &[f64], mask: &[usize], edges: &[f64]) -> Result<HistogramCurve> {
    histogram_curve(dose, mask, edges)
}

/// `rates` is indexed by ROI row, so `mask` refers to ROI rows.
pub fn drvh_curve(rates: &[f64], mask: &[usize], edges: &[f64]) -> Result<HistogramCurve> {
    histogram_curve(rates, mask, edges)
}

/// `V₁₀₀² / (V·V′₁₀₀)` with `V₁₀₀` the target voxels at or above the
/// prescription, `V` the target size and `V′₁₀₀` all voxels at or above it.
pub fn conformity_index(dose: &[f64], target: &[usize], prescription: f64) -> Result<f64> {
    if !(prescription > 0.0) {
        return Err(Error::Invalid {
            field: "prescription",
            msg: format!("must be > 0, got {prescription}"),
        });
    }
    let v100 = masked(dose, target, "conformity index")?
        .filter(|&d| d >= prescription)
        .count();
    let v100_all = dose.iter().filter(|&&d| d >= prescription).count();
    debug_assert!(v100_all >= v100);
    if v100 == 0 {
        return Ok(0.0);
    }
    Ok((v100 * v100) as f64 / (target.len() * v100_all) as f64)
}

/// Percentages of ROI rows with strictly positive dose slack `Bx − μ_d` and
/// dose-rate slack `(α/t)(B∘B)x − μ_dr·Bx`.
pub fn coverage_percentages(p: &FlashProblem, x: &[f64]) -> Result<(f64, f64)> {
    check_len("spot weights", p.n_spots(), x.len())?;
    let n = p.b_roi.n_rows();
    if n == 0 {
        return Err(Error::Invalid {
            field: "b_roi",
            msg: "ROI has no voxels".into(),
        });
    }
    let scale = p.alpha / p.t_min;
    let (mut dose_ok, mut rate_ok) = (0usize, 0usize);
    for j in 0..n {
        let (cols, vals) = p.b_roi.row(j);
        let (mut lin, mut sq) = (0.0, 0.0);
        for (&c, &v) in cols.iter().zip(vals) {
            lin += v * x[c];
            sq += v * v * x[c];
        }
        dose_ok += usize::from(lin - p.mu_d > 0.0);
        rate_ok += usize::from(scale * sq - p.mu_dr * lin > 0.0);
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok((pct(dose_ok), pct(rate_ok)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseStats {
    pub d_max: f64,
    pub d_mean: f64,
}

pub fn dose_stats(dose: &[f64], mask: &[usize]) -> Result<DoseStats> {
    let (mut d_max, mut sum) = (f64::NEG_INFINITY, 0.0);
    for d in masked(dose, mask, "dose statistics")? {
        d_max = d_max.max(d);
        sum += d;
    }
    Ok(DoseStats {
        d_max,
        d_mean: sum / mask.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ci: f64,
    pub p_d: f64,
    pub p_dr: f64,
    pub structures: BTreeMap<String, DoseStats>,
}

impl MetricsReport {
    pub fn evaluate(p: &FlashProblem, x: &[f64]) -> Result<Self> {
        let dose = dose_vector(p, x)?;
        let target = p.structure(TARGET).ok_or_else(|| Error::Invalid {
            field: "structures",
            msg: format!("no `{TARGET}` structure"),
        })?;
        let ci = conformity_index(&dose, target, p.prescription)?;
        let (p_d, p_dr) = coverage_percentages(p, x)?;
        let structures = p
            .structures
            .iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(name, m)| Ok((name.clone(), dose_stats(&dose, m)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            ci,
            p_d,
            p_dr,
            structures,
        })
    }
}

/// DVH for every nonempty structure on `[0, 1.2·Rx]` and the ROI DRVH on
/// `[0, 3·μ_dr]`.
pub struct PlanCurves {
    pub dvh: BTreeMap<String, HistogramCurve>,
    pub drvh_roi: HistogramCurve,
}

pub fn plan_curves(p: &FlashProblem, x: &[f64]) -> Result<PlanCurves> {
    let dose = dose_vector(p, x)?;
    let edges = uniform_edges(1.2 * p.prescription, DEFAULT_BINS);
    let dvh = p
        .structures
        .iter()
        .filter(|(_, m)| !m.is_empty())
        .map(|(name, m)| Ok((name.clone(), dvh_curve(&dose, m, &edges)?)))
        .collect::<Result<_>>()?;
    let rates = dose_rate_vector(p, x)?;
    let all_roi: Vec<usize> = (0..rates.len()).collect();
    let rate_upper = if p.mu_dr > 0.0 {
        3.0 * p.mu_dr
    } else {
        rates.iter().copied().fold(1.0, f64::max)
    };
    let drvh_roi = drvh_curve(&rates, &all_roi, &uniform_edges(rate_upper, DEFAULT_BINS))?;
    Ok(PlanCurves { dvh, drvh_roi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Structures;
    use crate::sparse::SparseMatrix;
    use proptest::prelude::*;

    fn roi_problem(b_roi: SparseMatrix, alpha: f64, mu_d: f64, mu_dr: f64) -> FlashProblem {
        let n = b_roi.n_cols();
        FlashProblem {
            a_matrix: SparseMatrix::identity(n),
            b: vec![0.0; n],
            b_roi,
            alpha,
            t_min: 1.0,
            mu_d,
            mu_dr,
            structures: Structures::new(),
            prescription: 1.0,
        }
    }

    #[test]
    fn dose_is_linear_in_weights() {
        let a = SparseMatrix::from_dense(&[vec![1.0, 2.0], vec![0.0, 3.0], vec![4.0, 0.5]]).unwrap();
        let mut p = roi_problem(SparseMatrix::identity(2), 1.0, 0.0, 0.0);
        p.a_matrix = a;
        p.b = vec![0.0; 3];
        assert_eq!(dose_vector(&p, &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(dose_vector(&p, &[0.0, 1.0]).unwrap(), vec![2.0, 3.0, 0.5]);
        let x1 = [0.3, 1.7];
        let x2 = [2.2, -0.4];
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let d = dose_vector(&p, &sum).unwrap();
        let d1 = dose_vector(&p, &x1).unwrap();
        let d2 = dose_vector(&p, &x2).unwrap();
        for k in 0..3 {
            assert!((d[k] - d1[k] - d2[k]).abs() <= 1e-12 * d[k].abs().max(1.0));
        }
        assert!(dose_vector(&p, &[1.0]).is_err());
    }

    #[test]
    fn dose_rate_examples() {
        // α = 2, t = 1, B = [[1]], x = 1 → 2·1/(1·1)
        let p = roi_problem(SparseMatrix::identity(1), 2.0, 0.0, 0.0);
        assert_eq!(dose_rate_vector(&p, &[1.0]).unwrap(), vec![2.0]);
        assert_eq!(dose_rate_vector(&p, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dose_rate_agrees_with_constraint_row() {
        let b = SparseMatrix::from_dense(&[vec![0.5, 0.1, 0.0], vec![0.2, 0.9, 0.3], vec![0.0, 0.05, 0.7]])
            .unwrap();
        let p = roi_problem(b, 3.0, 0.0, 1.0);
        let set = crate::problem::build_constraint_rows(&p).unwrap();
        for seed in 0..50u64 {
            let x: Vec<f64> = (0..3).map(|k| ((seed * 7 + k * 13) % 11) as f64 / 3.0).collect();
            let rates = dose_rate_vector(&p, &x).unwrap();
            let lin = p.b_roi.spmv(&x).unwrap();
            for j in 0..3 {
                if lin[j] > DOSE_FLOOR {
                    let row_ok = set.rows().row_dot(j, &x) >= 0.0;
                    assert_eq!(rates[j] >= p.mu_dr, row_ok, "x = {x:?}, row {j}");
                }
            }
        }
    }

    #[test]
    fn dvh_examples() {
        let uniform = histogram_curve(&[2.0, 2.0, 2.0], &[0, 1, 2], &[0.0, 1.0, 2.0, 2.5]).unwrap();
        assert_eq!(uniform.volume_fraction, vec![1.0, 1.0, 1.0, 0.0]);
        let two = histogram_curve(&[1.0, 3.0], &[0, 1], &[2.0]).unwrap();
        assert_eq!(two.volume_fraction, vec![0.5]);
        assert!(histogram_curve(&[1.0], &[], &[0.0]).is_err());
        assert_eq!(two.to_csv(), "edge,fraction\n2e0,5e-1\n");
    }

    #[test]
    fn conformity_examples() {
        // exact: target {0,1} at Rx, outside at 0
        assert_eq!(conformity_index(&[1.0, 1.0, 0.0, 0.0], &[0, 1], 1.0).unwrap(), 1.0);
        // half of a 4-voxel target covered, nothing outside: 2²/(4·2)
        assert_eq!(conformity_index(&[1.0, 1.0, 0.0, 0.0, 0.0], &[0, 1, 2, 3], 1.0).unwrap(), 0.5);
        assert_eq!(conformity_index(&[0.0, 0.0], &[0, 1], 1.0).unwrap(), 0.0);
        // spill outside: 1²/(1·3)
        let ci = conformity_index(&[1.0, 1.0, 1.0], &[0], 1.0).unwrap();
        assert!((ci - 1.0 / 3.0).abs() < 1e-15);
        assert!(conformity_index(&[1.0], &[], 1.0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let b = SparseMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // rate slack (2/1)·v² − 1·v at v = 1 → 1 > 0; dose slack 1 − 0.5 > 0
        let p = roi_problem(b, 2.0, 0.5, 1.0);
        assert_eq!(coverage_percentages(&p, &[1.0, 1.0]).unwrap(), (100.0, 100.0));
        assert_eq!(coverage_percentages(&p, &[0.0, 0.0]).unwrap().0, 0.0);
        assert_eq!(coverage_percentages(&p, &[1.0, 0.0]).unwrap(), (50.0, 50.0));
        // slack exactly zero counts as uncovered
        assert_eq!(coverage_percentages(&p, &[0.5, 0.5]).unwrap().0, 0.0);
    }

    #[test]
    fn coverage_matches_dose_threshold_count() {
        let b = SparseMatrix::from_dense(&[vec![1.0, 0.5], vec![0.2, 1.0], vec![0.7, 0.7]]).unwrap();
        let p = roi_problem(b, 2.0, 0.9, 1.5);
        for x in [[0.5, 0.5], [1.0, 0.2], [0.0, 2.0], [3.0, 3.0]] {
            let (p_d, p_dr) = coverage_percentages(&p, &x).unwrap();
            let dose = roi_dose_vector(&p, &x).unwrap();
            let above = dose.iter().filter(|&&d| d > p.mu_d).count();
            assert_eq!(p_d, 100.0 * above as f64 / 3.0);
            let rates = dose_rate_vector(&p, &x).unwrap();
            let fast = rates.iter().zip(&dose).filter(|&(&r, &d)| d > DOSE_FLOOR && r > p.mu_dr).count();
            assert_eq!(p_dr, 100.0 * fast as f64 / 3.0);
        }
    }

    #[test]
    fn dose_stats_examples() {
        assert_eq!(
            dose_stats(&[2.5, 2.5], &[0, 1]).unwrap(),
            DoseStats { d_max: 2.5, d_mean: 2.5 }
        );
        assert_eq!(
            dose_stats(&[1.0, 3.0, 100.0], &[0, 1]).unwrap(),
            DoseStats { d_max: 3.0, d_mean: 2.0 }
        );
        assert!(dose_stats(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn histogram_is_nonincreasing(
            values in prop::collection::vec(0.0f64..10.0, 1..60),
            upper in 0.1f64..12.0,
        ) {
            let mask: Vec<usize> = (0..values.len()).collect();
            let c = histogram_curve(&values, &mask, &uniform_edges(upper, 40)).unwrap();
            prop_assert!(c.volume_fraction[0] <= 1.0);
            for w in c.volume_fraction.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
