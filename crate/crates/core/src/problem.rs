//! FLASH planning problem: dose-influence data, physical bounds, structure
//! masks, the dose / dose-rate constraint rows, a synthetic phantom generator
//! and the on-disk problem directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{self, DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::DenseVector;
use crate::objective::LeastSquares;
use crate::projections::{DykstraOptions, MmuMode, MmuSet, Polyhedron, SmoothedDistance};
use crate::solver::CompositeProblem;
use crate::sparse::{load_matrix_market, save_matrix_market, SparseMatrix};

pub const TARGET: &str = "target";
pub const ROI: &str = "roi";
pub const BODY: &str = "body";

/// Named voxel-index masks, kept in name order so that serialization and
/// per-structure reports are stable.
pub type Structures = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct FlashProblem {
    /// Dose influence, voxels × spots.
    pub a_matrix: SparseMatrix,
    /// Objective dose per voxel (Gy).
    pub b: DenseVector,
    /// Influence rows of the ROI voxels.
    pub b_roi: SparseMatrix,
    /// Minimum monitor units per delivered spot.
    pub alpha: f64,
    /// Minimum spot duration (s).
    pub t_min: f64,
    /// ROI dose lower bound (Gy).
    pub mu_d: f64,
    /// ROI dose-rate lower bound (Gy/s).
    pub mu_dr: f64,
    pub structures: Structures,
    /// Prescription dose (Gy), used for CI and DVH bins.
    pub prescription: f64,
}

impl FlashProblem {
    pub fn n_voxels(&self) -> usize {
        self.a_matrix.n_rows()
    }

    pub fn n_spots(&self) -> usize {
        self.a_matrix.n_cols()
    }

    pub fn structure(&self, name: &str) -> Option<&[usize]> {
        self.structures.get(name).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("objective dose", self.a_matrix.n_rows(), self.b.len())?;
        check_len("ROI influence columns", self.a_matrix.n_cols(), self.b_roi.n_cols())?;
        non_negative("alpha", self.alpha)?;
        non_negative("mu_d", self.mu_d)?;
        non_negative("mu_dr", self.mu_dr)?;
        if !(self.t_min > 0.0 && self.t_min.is_finite()) {
            return Err(Error::Invalid {
                field: "t_min",
                msg: format!("must be > 0, got {}", self.t_min),
            });
        }
        if !(self.prescription > 0.0 && self.prescription.is_finite()) {
            return Err(Error::Invalid {
                field: "prescription",
                msg: format!("must be > 0, got {}", self.prescription),
            });
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid {
                field: "b",
                msg: "non-finite objective dose".into(),
            });
        }
        let n = self.n_voxels();
        for (name, idx) in &self.structures {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Invalid {
                    field: "structures",
                    msg: format!("`{name}` has voxel {bad} but there are only {n} voxels"),
                });
            }
        }
        Ok(())
    }

    /// `(1/2N)‖Ax − b‖²`
    pub fn objective_value(&self, x: &[f64]) -> Result<f64> {
        check_len("spot weights", self.n_spots(), x.len())?;
        let ax = self.a_matrix.spmv(x)?;
        let sq: f64 = ax.iter().zip(&self.b).map(|(d, t)| (d - t) * (d - t)).sum();
        Ok(0.5 * sq / self.n_voxels() as f64)
    }

    pub fn least_squares(&self) -> Result<LeastSquares> {
        LeastSquares::new(self.a_matrix.clone(), self.b.clone())
    }

    /// Assembles `F + G + H` with smoothing weight `lambda` on the
    /// constraint distance and the MMU set in the given mode.
    pub fn to_composite(&self, lambda: f64, mmu_mode: MmuMode, dykstra: DykstraOptions) -> Result<CompositeProblem> {
        let set = build_constraint_rows(self)?;
        CompositeProblem::new(
            self.least_squares()?,
            SmoothedDistance::new(set, lambda, dykstra)?,
            Some(MmuSet::new(self.alpha, mmu_mode)?),
        )
    }
}

fn non_negative(field: &'static str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Invalid {
            field,
            msg: format!("must be finite and >= 0, got {v}"),
        });
    }
    Ok(())
}

/// Dose-rate rows `(α/t)(B∘B) − μ_dr·B` with bound 0, followed by dose rows
/// `B` with bound `μ_d`. Rows that vanish identically carry no information
/// and are dropped.
pub fn build_constraint_rows(p: &FlashProblem) -> Result<Polyhedron> {
    let b = &p.b_roi;
    if b.values().iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidMatrix("ROI influence matrix is identically zero".into()));
    }
    let rate_scale = p.alpha / p.t_min;
    let n_roi = b.n_rows();
    let mut triplets = Vec::with_capacity(2 * b.nnz());
    let mut bounds = Vec::with_capacity(2 * n_roi);
    let mut row = 0;
    let mut dropped = 0;
    let families: [(&dyn Fn(f64) -> f64, f64); 2] = [
        (&|v: f64| rate_scale * v * v - p.mu_dr * v, 0.0),
        (&|v: f64| v, p.mu_d),
    ];
    for (coef, bound) in families {
        for j in 0..n_roi {
            let (cols, vals) = b.row(j);
            let entries: Vec<(usize, f64)> = cols
                .iter()
                .zip(vals)
                .map(|(&c, &v)| (c, coef(v)))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            if entries.is_empty() {
                dropped += 1;
                continue;
            }
            triplets.extend(entries.into_iter().map(|(c, v)| (row, c, v)));
            bounds.push(bound);
            row += 1;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} identically zero constraint rows");
    }
    let rows = SparseMatrix::from_triplets(row, b.n_cols(), &triplets)?;
    Polyhedron::new(rows, bounds)
}

/// Geometry and physics knobs of the synthetic phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_voxels: usize,
    pub n_spots: usize,
    /// Number of beam directions, 2 to 4.
    pub n_angles: usize,
    /// Number of organs at risk, 1 or 2.
    pub n_oars: usize,
    /// Target radius as a fraction of the grid half-width.
    pub target_radius: f64,
    /// Width of the ROI ring around the target, in voxels.
    pub ring_width: f64,
    /// Lateral standard deviation of a pencil beam, in voxels.
    pub beam_sigma: f64,
    pub alpha: f64,
    pub mu_dr: f64,
    /// `μ_d` as a fraction of the prescription.
    pub mu_d_fraction: f64,
    /// Prescription in units of the dose a typical target voxel receives
    /// when every spot carries `α` monitor units.
    pub dose_level: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            n_voxels: 2000,
            n_spots: 80,
            n_angles: 4,
            n_oars: 2,
            target_radius: 0.6,
            ring_width: 3.0,
            beam_sigma: 0.8,
            alpha: 160.0,
            mu_dr: 40.0,
            mu_d_fraction: 0.3,
            dose_level: 2.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, msg: String| Err(Error::Invalid { field, msg });
        if self.n_spots < 4 {
            return bad("n_spots", format!("need at least 4 spots, got {}", self.n_spots));
        }
        if self.n_voxels < self.n_spots {
            return bad(
                "n_voxels",
                format!("need at least n_spots = {} voxels, got {}", self.n_spots, self.n_voxels),
            );
        }
        if !(2..=4).contains(&self.n_angles) {
            return bad("n_angles", format!("must be 2, 3 or 4, got {}", self.n_angles));
        }
        if !(1..=2).contains(&self.n_oars) {
            return bad("n_oars", format!("must be 1 or 2, got {}", self.n_oars));
        }
        if !(self.target_radius > 0.0 && self.target_radius < 1.0) {
            return bad(
                "target_radius",
                format!("target must fit inside the grid (0 < r < 1), got {}", self.target_radius),
            );
        }
        for (field, v) in [
            ("ring_width", self.ring_width),
            ("beam_sigma", self.beam_sigma),
            ("alpha", self.alpha),
            ("mu_dr", self.mu_dr),
            ("dose_level", self.dose_level),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.mu_d_fraction) {
            return bad("mu_d_fraction", format!("must lie in [0, 1), got {}", self.mu_d_fraction));
        }
        Ok(())
    }
}

struct Grid {
    width: usize,
    n: usize,
    center: (f64, f64),
    half_extent: f64,
}

impl Grid {
    fn new(n: usize) -> Self {
        let width = (n as f64).sqrt().ceil() as usize;
        let height = n.div_ceil(width);
        Self {
            width,
            n,
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            half_extent: width.min(height) as f64 / 2.0,
        }
    }

    fn offset(&self, v: usize) -> (f64, f64) {
        ((v % self.width) as f64 - self.center.0, (v / self.width) as f64 - self.center.1)
    }

    fn disk(&self, centre: (f64, f64), radius: f64) -> Vec<usize> {
        (0..self.n)
            .filter(|&v| {
                let (dx, dy) = self.offset(v);
                (dx - centre.0).hypot(dy - centre.1) <= radius
            })
            .collect()
    }
}

/// Builds a 2-D phantom: a disk target with prescription dose, a ring ROI
/// around it, one or two disk OARs just outside the ring, and spots on
/// parallel lines from several beam angles with truncated Gaussian lateral
/// profiles. `A` is scaled so that `λ_max(AᵀA)/N = 1`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<FlashProblem> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = Grid::new(spec.n_voxels);
    let radius = spec.target_radius * grid.half_extent;
    let outer = radius + spec.ring_width;

    let target = grid.disk((0.0, 0.0), radius);
    if target.is_empty() {
        return Err(Error::Invalid {
            field: "target_radius",
            msg: "target contains no voxels".into(),
        });
    }
    let ring: Vec<usize> = grid
        .disk((0.0, 0.0), outer)
        .into_iter()
        .filter(|v| target.binary_search(v).is_err())
        .collect();
    if ring.is_empty() {
        return Err(Error::Invalid {
            field: "ring_width",
            msg: "ROI ring contains no voxels".into(),
        });
    }

    let mut structures = Structures::new();
    let oar_radius = (0.5 * (grid.half_extent - outer)).max(1.0);
    let first = rng.gen_range(0.0..std::f64::consts::TAU);
    for k in 0..spec.n_oars {
        let phi = first + k as f64 * 2.3;
        let d = outer + oar_radius + 0.5;
        let oar: Vec<usize> = grid
            .disk((d * phi.cos(), d * phi.sin()), oar_radius)
            .into_iter()
            .filter(|&v| {
                let (dx, dy) = grid.offset(v);
                dx.hypot(dy) > outer
            })
            .collect();
        if oar.is_empty() {
            return Err(Error::Invalid {
                field: "target_radius",
                msg: "no room for organs at risk outside the ROI ring".into(),
            });
        }
        structures.insert(format!("oar{}", k + 1), oar);
    }

    // Spots per angle spread evenly across the ROI's lateral extent.
    let cutoff = 3.0 * spec.beam_sigma;
    let angle_jitter = rng.gen_range(0.0..std::f64::consts::PI / spec.n_angles as f64);
    let mut triplets = Vec::new();
    let mut spot = 0;
    for k in 0..spec.n_angles {
        let count = spec.n_spots / spec.n_angles + usize::from(k < spec.n_spots % spec.n_angles);
        let theta = angle_jitter + k as f64 * std::f64::consts::PI / spec.n_angles as f64;
        let normal = (-theta.sin(), theta.cos());
        for s in 0..count {
            let lateral = if count == 1 {
                0.0
            } else {
                -outer + 2.0 * outer * s as f64 / (count - 1) as f64
            };
            let weight = rng.gen_range(0.9..1.1);
            for v in 0..grid.n {
                let (dx, dy) = grid.offset(v);
                let off = dx * normal.0 + dy * normal.1 - lateral;
                if off.abs() <= cutoff {
                    let value = weight * (-0.5 * (off / spec.beam_sigma).powi(2)).exp();
                    triplets.push((v, spot, value));
                }
            }
            spot += 1;
        }
    }
    let raw = SparseMatrix::from_triplets(grid.n, spec.n_spots, &triplets)?;
    let scale = (grid.n as f64 / raw.spectral_norm_sq(300)).sqrt();
    let a_matrix = raw.map_values(|v| v * scale);

    let row_sums: Vec<f64> = target
        .iter()
        .map(|&v| a_matrix.row(v).1.iter().sum())
        .collect();
    if row_sums.iter().any(|&s| s <= 0.0) {
        return Err(Error::Invalid {
            field: "beam_sigma",
            msg: "some target voxels receive no dose".into(),
        });
    }
    let prescription = spec.dose_level * spec.alpha * median(&row_sums);

    let b_roi = a_matrix.select_rows(&ring)?;
    // Pick the shortest spot duration for which every ROI voxel can reach the
    // dose-rate bound from its strongest spot with a margin of two.
    let weakest_peak = (0..b_roi.n_rows())
        .map(|j| b_roi.row(j).1.iter().copied().fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    let t_min = spec.alpha * weakest_peak / (2.0 * spec.mu_dr);

    let mut b = vec![0.0; grid.n];
    for &v in &target {
        b[v] = prescription;
    }
    structures.insert(TARGET.into(), target);
    structures.insert(ROI.into(), ring);
    structures.insert(BODY.into(), (0..grid.n).collect());

    let problem = FlashProblem {
        a_matrix,
        b,
        b_roi,
        alpha: spec.alpha,
        t_min,
        mu_d: spec.mu_d_fraction * prescription,
        mu_dr: spec.mu_dr,
        structures,
        prescription,
    };
    problem.validate()?;
    Ok(problem)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

pub const A_FILE: &str = "A.mtx";
pub const B_FILE: &str = "B.mtx";
pub const TARGET_FILE: &str = "b.vec";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    alpha: f64,
    t_min: f64,
    mu_d: f64,
    mu_dr: f64,
    prescription: f64,
    structures: &'a Structures,
    normalization: &'static str,
}

const MANIFEST_KEYS: [&str; 7] = [
    "alpha",
    "t_min",
    "mu_d",
    "mu_dr",
    "prescription",
    "structures",
    "normalization",
];

/// Writes `A.mtx`, `B.mtx`, `b.vec` and `manifest.json` into `dir`,
/// creating it if needed.
pub fn save_problem(p: &FlashProblem, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_matrix_market(&p.a_matrix, dir.join(A_FILE))?;
    save_matrix_market(&p.b_roi, dir.join(B_FILE))?;
    write_vector(&p.b, dir.join(TARGET_FILE))?;
    let manifest = Manifest {
        alpha: p.alpha,
        t_min: p.t_min,
        mu_d: p.mu_d,
        mu_dr: p.mu_dr,
        prescription: p.prescription,
        structures: &p.structures,
        normalization: "mean",
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_problem(dir: impl AsRef<Path>) -> Result<FlashProblem> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let schema = |field: &str, msg: String| Error::Schema {
        path: path.clone(),
        field: field.to_string(),
        msg,
    };
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| schema("<root>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("<root>", "expected a JSON object".into()))?;
    if let Some(unknown) = obj.keys().find(|k| !MANIFEST_KEYS.contains(&k.as_str())) {
        return Err(schema(unknown, "unknown key".into()));
    }
    let field = |name: &str| -> Result<&serde_json::Value> {
        obj.get(name).ok_or_else(|| schema(name, "missing".into()))
    };
    fn typed<T: DeserializeOwned>(v: &serde_json::Value) -> std::result::Result<T, String> {
        T::deserialize(v).map_err(|e| e.to_string())
    }
    let number = |name: &str| -> Result<f64> { typed(field(name)?).map_err(|m| schema(name, m)) };

    let normalization: String = typed(field("normalization")?).map_err(|m| schema("normalization", m))?;
    if normalization != "mean" {
        return Err(schema(
            "normalization",
            format!("only \"mean\" is supported, got {normalization:?}"),
        ));
    }
    field("structures")?;
    // Read from the raw text: the generic value above has already collapsed
    // repeated keys.
    #[derive(Deserialize)]
    struct Probe {
        structures: UniqueMap,
    }
    let structures = serde_json::from_str::<Probe>(&text)
        .map_err(|e| schema("structures", e.to_string()))?
        .structures;
    let problem = FlashProblem {
        a_matrix: load_matrix_market(dir.join(A_FILE))?,
        b: read_vector(dir.join(TARGET_FILE))?,
        b_roi: load_matrix_market(dir.join(B_FILE))?,
        alpha: number("alpha")?,
        t_min: number("t_min")?,
        mu_d: number("mu_d")?,
        mu_dr: number("mu_dr")?,
        structures: structures.0,
        prescription: number("prescription")?,
    };
    problem.validate()?;
    Ok(problem)
}

/// A JSON object of index lists that rejects repeated keys instead of
/// silently keeping the last one.
struct UniqueMap(Structures);

impl<'de> Deserialize<'de> for UniqueMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueMap;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping structure names to voxel index lists")
            }
            fn visit_map<M: MapAccess<'de>>(self, mut m: M) -> std::result::Result<UniqueMap, M::Error> {
                let mut out = Structures::new();
                while let Some((k, v)) = m.next_entry::<String, Vec<usize>>()? {
                    if out.contains_key(&k) {
                        return Err(de::Error::custom(format!("duplicate structure name `{k}`")));
                    }
                    out.insert(k, v);
                }
                Ok(UniqueMap(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// One value per line in shortest round-trip form.
pub fn write_vector(v: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for x in v {
            writeln!(w, "{x:e}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads one real per line; blank lines and `#` comments are skipped.
pub fn read_vector(path: impl AsRef<Path>) -> Result<DenseVector> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::Parse {
            path: path.clone(),
            line: idx + 1,
            msg: format!("expected a real number, got {t:?}"),
        })?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(b_roi: SparseMatrix, alpha: f64, t: f64, mu_d: f64, mu_dr: f64) -> FlashProblem {
        let n = b_roi.n_cols();
        FlashProblem {
            a_matrix: SparseMatrix::identity(n),
            b: vec![0.0; n],
            b_roi,
            alpha,
            t_min: t,
            mu_d,
            mu_dr,
            structures: Structures::new(),
            prescription: 1.0,
        }
    }

    #[test]
    fn constraint_rows_single_entry() {
        // dose rate: 2·1² − 1·1 = 1, bound 0; dose: 1, bound 1
        let p = tiny(SparseMatrix::identity(1), 2.0, 1.0, 1.0, 1.0);
        let set = build_constraint_rows(&p).unwrap();
        assert_eq!(set.rows().triplets().collect::<Vec<_>>(), vec![(0, 0, 1.0), (1, 0, 1.0)]);
        assert_eq!(set.bounds(), &[0.0, 1.0]);
    }

    #[test]
    fn constraint_rows_square_entrywise() {
        let b = SparseMatrix::from_dense(&[vec![2.0, 3.0]]).unwrap();
        let p = tiny(b, 1.0, 1.0, 0.0, 0.0);
        let set = build_constraint_rows(&p).unwrap();
        assert_eq!(set.n_constraints(), 2);
        assert_eq!(set.rows().row(0).1, &[4.0, 9.0]);
        assert_eq!(set.rows().row(1).1, &[2.0, 3.0]);
        assert_eq!(set.bounds(), &[0.0, 0.0]);
    }

    #[test]
    fn constraint_rows_drop_zero_rows() {
        // (α/t)·1 − μ_dr·1 = 0 on the first row; the second B row is empty.
        let b = SparseMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let p = tiny(b, 3.0, 1.0, 0.2, 3.0);
        let set = build_constraint_rows(&p).unwrap();
        // rate rows: [0 dropped], [empty dropped], [0, 3·0.25 − 1.5] ; dose rows: 2 kept
        assert_eq!(set.n_constraints(), 3);
        assert_eq!(set.rows().row(0).1, &[0.75 - 1.5]);
        assert_eq!(set.bounds(), &[0.0, 0.2, 0.2]);
    }

    #[test]
    fn constraint_rows_reject_zero_b() {
        let p = tiny(SparseMatrix::zeros(2, 2), 1.0, 1.0, 1.0, 1.0);
        assert!(matches!(build_constraint_rows(&p), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn objective_values() {
        let mut p = tiny(SparseMatrix::identity(2), 1.0, 1.0, 0.0, 0.0);
        assert_eq!(p.objective_value(&[1.0, 1.0]).unwrap(), 0.5);
        p.b = vec![1.0, 1.0];
        assert_eq!(p.objective_value(&[1.0, 1.0]).unwrap(), 0.0);
        // residual (1, 2) then (2, 4)
        p.b = vec![0.0, 0.0];
        let v1 = p.objective_value(&[1.0, 2.0]).unwrap();
        let v2 = p.objective_value(&[2.0, 4.0]).unwrap();
        assert_eq!(v2, 4.0 * v1);
        assert!(p.objective_value(&[1.0]).is_err());
    }

    #[test]
    fn objective_matches_sample_mean() {
        let p = generate_phantom(&PhantomSpec {
            n_voxels: 400,
            n_spots: 20,
            ..PhantomSpec::default()
        })
        .unwrap();
        let h = p.least_squares().unwrap();
        let x: Vec<f64> = (0..p.n_spots()).map(|i| 100.0 + 7.0 * i as f64).collect();
        let mean: f64 = (0..h.n_samples()).map(|i| h.sample_value(i, &x)).sum::<f64>() / h.n_samples() as f64;
        let v = p.objective_value(&x).unwrap();
        assert!((v - mean).abs() <= 1e-12 * v.abs(), "{v} vs {mean}");
    }

    #[test]
    fn phantom_is_deterministic_and_well_formed() {
        let spec = PhantomSpec::default();
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p, generate_phantom(&spec).unwrap());
        assert_ne!(p.a_matrix, generate_phantom(&PhantomSpec { seed: 7, ..spec.clone() }).unwrap().a_matrix);

        assert_eq!(p.n_voxels(), 2000);
        assert_eq!(p.n_spots(), 80);
        for name in [TARGET, ROI, BODY, "oar1", "oar2"] {
            assert!(!p.structure(name).unwrap().is_empty(), "{name}");
        }
        let target = p.structure(TARGET).unwrap();
        assert!(target.iter().all(|&v| p.a_matrix.row(v).1.iter().sum::<f64>() > 0.0));
        for (v, &d) in p.b.iter().enumerate() {
            assert_eq!(d, if target.contains(&v) { p.prescription } else { 0.0 });
        }
        // every column nonzero and bounded
        let mut col_sq = vec![0.0; p.n_spots()];
        for (_, c, v) in p.a_matrix.triplets() {
            col_sq[c] += v * v;
        }
        assert!(col_sq.iter().all(|&s| s > 0.0 && s.is_finite()));
        let l = p.a_matrix.spectral_norm_sq(500) / p.n_voxels() as f64;
        assert!((l - 1.0).abs() < 1e-6, "{l}");
        // every dose-rate row has a positive coefficient
        let set = build_constraint_rows(&p).unwrap();
        let n_roi = p.b_roi.n_rows();
        assert_eq!(set.n_constraints(), 2 * n_roi);
        for j in 0..n_roi {
            assert!(set.rows().row(j).1.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn phantom_rejects_bad_geometry() {
        let d = PhantomSpec::default();
        assert!(generate_phantom(&PhantomSpec { target_radius: 1.5, ..d.clone() }).is_err());
        assert!(generate_phantom(&PhantomSpec { n_spots: 3, ..d.clone() }).is_err());
        assert!(generate_phantom(&PhantomSpec { n_voxels: 50, n_spots: 80, ..d.clone() }).is_err());
        assert!(generate_phantom(&PhantomSpec { n_angles: 5, ..d }).is_err());
    }

    #[test]
    fn validation_catches_bad_scalars() {
        let mut p = tiny(SparseMatrix::identity(1), 1.0, 1.0, 0.0, 0.0);
        assert!(p.validate().is_ok());
        p.t_min = -1.0;
        assert!(matches!(p.validate(), Err(Error::Invalid { field: "t_min", .. })));
        p.t_min = 1.0;
        p.structures.insert("x".into(), vec![3]);
        assert!(p.validate().is_err());
    }
}
