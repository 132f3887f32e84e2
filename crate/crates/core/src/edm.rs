//! Euclidean distance matrices: construction, validation, Gram conversion,
//! realization back to coordinates, masks and rank diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::Trajectory;
use crate::rng;

/// Default cap on matrix size.
pub const MAX_N: usize = 1024;

/// Relative eigenvalue threshold used by [`realize`].
pub const SCHOENBERG_TOL: f64 = 1e-8;

/// Symmetric hollow non-negative matrix of pairwise distances.
///
/// Entries are squared distances unless `squared` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    data: DMatrix<f64>,
    squared: bool,
}

impl DistanceMatrix {
    /// Checked constructor: square, finite, exactly symmetric, hollow, non-negative.
    pub fn new(data: DMatrix<f64>, squared: bool) -> Result<Self> {
        let n = data.nrows();
        if data.ncols() != n {
            return Err(Error::shape(
                format!("square matrix ({n}x{n})"),
                format!("{}x{}", n, data.ncols()),
            ));
        }
        if n > MAX_N {
            return Err(Error::invalid(format!("n={n} exceeds the cap of {MAX_N}")));
        }
        for i in 0..n {
            if data[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                let v = data[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!(
                        "entry ({i},{j}) = {v} is not a finite non-negative distance"
                    )));
                }
                if v != data[(j, i)] {
                    return Err(Error::invalid(format!("entry ({i},{j}) is not symmetric")));
                }
            }
        }
        Ok(Self { data, squared })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("rows must form a square matrix"));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]), true)
    }

    /// Build from an arbitrary square matrix by symmetrizing, zeroing the
    /// diagonal and clipping negatives.
    pub fn sanitized(m: &DMatrix<f64>, squared: bool) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::shape(format!("{n}x{n}"), format!("{}x{}", n, m.ncols())));
        }
        let data = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                (0.5 * (m[(i, j)] + m[(j, i)])).max(0.0)
            }
        });
        Self::new(data, squared)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            data: DMatrix::zeros(n, n),
            squared: true,
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn is_squared(&self) -> bool {
        self.squared
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Entry `(i,j)` as a plain (unsquared) distance.
    pub fn raw_distance(&self, i: usize, j: usize) -> f64 {
        let v = self.data[(i, j)];
        if self.squared {
            v.sqrt()
        } else {
            v
        }
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.data[(i, j)]);
            }
        }
        out
    }

    /// Strict upper triangle, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.data[(i, j)]);
            }
        }
        out
    }

    pub fn validate(&self, opts: &ValidationOptions) -> EdmValidation {
        validate_edm(&self.data, opts)
    }
}

/// Squared pairwise distances of the trajectory's points.
pub fn edm_from_trajectory(traj: &Trajectory) -> DistanceMatrix {
    let n = traj.len();
    let mut data = DMatrix::zeros(n, n);
    for i in 0..n {
        let pi = traj.point(i);
        for j in i + 1..n {
            let d: f64 = pi.iter().zip(traj.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            data[(i, j)] = d;
            data[(j, i)] = d;
        }
    }
    DistanceMatrix { data, squared: true }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub tol: f64,
    /// Check this many random triples instead of all of them.
    pub sample_triples: Option<usize>,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            sample_triples: None,
            seed: 0,
        }
    }
}

impl ValidationOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// Worst violation found in one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub passed: bool,
    pub worst: f64,
    pub violations: usize,
}

impl Check {
    fn new() -> Self {
        Self {
            passed: true,
            worst: 0.0,
            violations: 0,
        }
    }

    fn record(&mut self, excess: f64, tol: f64) {
        if excess > self.worst {
            self.worst = excess;
        }
        if excess > tol {
            self.passed = false;
            self.violations += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmValidation {
    pub symmetry: Check,
    pub hollowness: Check,
    pub nonnegativity: Check,
    pub triangle: Check,
}

impl EdmValidation {
    pub fn is_valid(&self) -> bool {
        self.symmetry.passed && self.hollowness.passed && self.nonnegativity.passed && self.triangle.passed
    }

    /// Everything except the triangle inequality.
    pub fn is_structurally_valid(&self) -> bool {
        self.symmetry.passed && self.hollowness.passed && self.nonnegativity.passed
    }
}

/// Check symmetry, hollowness, non-negativity and `√a_ij ≤ √a_ik + √a_kj`
/// on a raw square matrix of squared distances.
pub fn validate_edm(m: &DMatrix<f64>, opts: &ValidationOptions) -> EdmValidation {
    let n = m.nrows().min(m.ncols());
    let tol = opts.tol;
    let mut symmetry = Check::new();
    let mut hollowness = Check::new();
    let mut nonnegativity = Check::new();
    let mut triangle = Check::new();

    for i in 0..n {
        hollowness.record(m[(i, i)].abs(), tol);
        for j in 0..n {
            nonnegativity.record(-m[(i, j)], tol);
            if j > i {
                symmetry.record((m[(i, j)] - m[(j, i)]).abs(), tol);
            }
        }
    }
    let dist = |i: usize, j: usize| m[(i, j)].max(0.0).sqrt();
    let mut check_triple = |i: usize, j: usize, k: usize| {
        triangle.record(dist(i, j) - dist(i, k) - dist(k, j), tol);
    };
    match opts.sample_triples {
        Some(count) if n >= 3 => {
            let mut rng = rng::stream(opts.seed, 0);
            for _ in 0..count {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let k = rng.random_range(0..n);
                check_triple(i, j, k);
            }
        }
        _ => {
            for i in 0..n {
                for j in i + 1..n {
                    for k in 0..n {
                        if k != i && k != j {
                            check_triple(i, j, k);
                        }
                    }
                }
            }
        }
    }
    if m.nrows() != m.ncols() {
        symmetry.passed = false;
    }
    EdmValidation {
        symmetry,
        hollowness,
        nonnegativity,
        triangle,
    }
}

/// Gram matrix relative to the first point: `g_ij = ½(a_0i − a_ij + a_0j)`.
pub fn gram_from_edm(m: &DistanceMatrix) -> DMatrix<f64> {
    let n = m.n();
    let k = n.saturating_sub(1);
    let a = &m.data;
    DMatrix::from_fn(k, k, |i, j| 0.5 * (a[(0, i + 1)] - a[(i + 1, j + 1)] + a[(0, j + 1)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RealizeMode {
    /// Fail unless the Gram matrix is PSD with rank at most `dim`.
    Strict,
    /// Classical-MDS optimal embedding; negative and surplus eigenvalues are dropped.
    BestEffort,
}

#[derive(Debug, Clone)]
pub struct Realization {
    pub trajectory: Trajectory,
    /// Max-norm difference between the input and the realized EDM.
    pub residual: f64,
    /// Eigenvalues of the Gram matrix, descending.
    pub spectrum: Vec<f64>,
}

/// Recover coordinates from a distance matrix.
///
/// `tol` is relative to the largest Gram eigenvalue.
pub fn realize(m: &DistanceMatrix, dim: usize, tol: f64, mode: RealizeMode) -> Result<Realization> {
    if !m.squared {
        return Err(Error::invalid("realize expects squared distances"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    let n = m.n();
    let g = gram_from_edm(m);
    let k = g.nrows();
    let (values, vectors) = if k == 0 {
        (Vec::new(), DMatrix::zeros(0, 0))
    } else {
        let eig = SymmetricEigen::new(g);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
        (values, vectors)
    };
    let scale = values.first().copied().unwrap_or(0.0).abs();
    let thresh = tol * scale;

    if mode == RealizeMode::Strict {
        if let Some(&neg) = values.iter().find(|&&v| v < -thresh) {
            return Err(Error::NotRealizable {
                dim,
                reason: format!("Gram matrix has negative eigenvalue {neg:e}"),
                spectrum: values,
            });
        }
        let rank = values.iter().filter(|&&v| v > thresh).count();
        if rank > dim {
            return Err(Error::NotRealizable {
                dim,
                reason: format!("Gram rank {rank} exceeds dimension"),
                spectrum: values,
            });
        }
    }

    let mut coords = vec![0.0; n * dim];
    for c in 0..dim.min(k) {
        let lambda = values[c];
        if lambda <= thresh {
            continue;
        }
        let s = lambda.sqrt();
        for r in 0..k {
            coords[(r + 1) * dim + c] = vectors[(r, c)] * s;
        }
    }
    let trajectory = Trajectory::new(dim, coords)?;
    let rebuilt = edm_from_trajectory(&trajectory);
    let residual = (rebuilt.matrix() - m.matrix()).amax();
    Ok(Realization {
        trajectory,
        residual,
        spectrum: values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankNorm {
    /// `sqrt(Σ_{i≤r} σ_i²) / sqrt(Σ σ_i²)`
    SpectralL2,
    /// `Σ_{i≤r} σ_i / Σ σ_i`
    Nuclear,
}

/// Share of the top `r` singular values in the chosen aggregate.
pub fn rank_fraction(m: &DistanceMatrix, r: usize, norm: RankNorm) -> Result<f64> {
    let n = m.n();
    if r > n {
        return Err(Error::invalid(format!("r={r} exceeds n={n}")));
    }
    let mut sv: Vec<f64> = m.data.clone().symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let agg = |vals: &[f64]| match norm {
        RankNorm::SpectralL2 => vals.iter().map(|v| v * v).sum::<f64>().sqrt(),
        RankNorm::Nuclear => vals.iter().sum::<f64>(),
    };
    let total = agg(&sv);
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(agg(&sv[..r]) / total)
}

/// Symmetric binary matrix of known pairs; the diagonal is always unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(n: usize, mut known: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let b = known(i, j);
                bits[i * n + j] = b;
                bits[j * n + i] = b;
            }
        }
        Self { n, bits }
    }

    /// From a row-major bit vector; must be symmetric with a zero diagonal.
    pub fn from_bits(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * n {
            return Err(Error::shape(n * n, bits.len()));
        }
        for i in 0..n {
            if bits[i * n + i] {
                return Err(Error::invalid(format!("mask diagonal entry {i} is set")));
            }
            for j in i + 1..n {
                if bits[i * n + j] != bits[j * n + i] {
                    return Err(Error::invalid(format!("mask entry ({i},{j}) is not symmetric")));
                }
            }
        }
        Ok(Self { n, bits })
    }

    pub fn all_known(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    pub fn none_known(n: usize) -> Self {
        Self::from_fn(n, |_, _| false)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_known(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Known pairs `(i, j)` with `i < j`.
    pub fn known_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_known(i, j))
    }

    /// Unknown off-diagonal pairs `(i, j)` with `i < j`.
    pub fn unknown_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !self.is_known(i, j))
    }

    pub fn known_count(&self) -> usize {
        self.known_pairs().count()
    }

    /// `μ = 2m / (n(n−1))` with `m` the number of unknown pairs.
    pub fn missing_ratio(&self) -> f64 {
        let pairs = self.n * self.n.saturating_sub(1) / 2;
        if pairs == 0 {
            return 0.0;
        }
        (pairs - self.known_count()) as f64 / pairs as f64
    }

    /// Known here and in `other`.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if self.n != other.n {
            return Err(Error::shape(self.n, other.n));
        }
        Ok(Mask::from_fn(self.n, |i, j| {
            self.is_known(i, j) && other.is_known(i, j)
        }))
    }

    /// Known here but not in `other`.
    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        if self.n != other.n {
            return Err(Error::shape(self.n, other.n));
        }
        Ok(Mask::from_fn(self.n, |i, j| {
            self.is_known(i, j) && !other.is_known(i, j)
        }))
    }

    /// Off-diagonal complement.
    pub fn complement(&self) -> Mask {
        Mask::from_fn(self.n, |i, j| !self.is_known(i, j))
    }

    /// Known-pair count per vertex.
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| (0..self.n).filter(|&j| self.is_known(i, j)).count())
            .collect()
    }
}

/// Each upper-triangle pair is unknown with probability `mu`.
pub fn random_mask(n: usize, mu: f64, seed: u64) -> Result<Mask> {
    random_mask_indexed(n, mu, seed, 0)
}

/// As [`random_mask`], using stream `index` of the seed (for batches).
pub fn random_mask_indexed(n: usize, mu: f64, seed: u64, index: u64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("mu must lie in [0, 1], got {mu}")));
    }
    let mut rng = rng::stream(seed, index);
    Ok(Mask::from_fn(n, |_, _| rng.random::<f64>() >= mu))
}

/// Hide every pair touching a dropped row/column.
pub fn row_col_mask(n: usize, drop: &[usize]) -> Result<Mask> {
    let mut dropped = vec![false; n];
    for &d in drop {
        if d >= n {
            return Err(Error::invalid(format!("drop index {d} out of range for n={n}")));
        }
        if dropped[d] {
            return Err(Error::invalid(format!("drop index {d} repeated")));
        }
        dropped[d] = true;
    }
    Ok(Mask::from_fn(n, |i, j| !dropped[i] && !dropped[j]))
}

/// A distance matrix with a mask of trusted entries.
///
/// Untrusted entries hold a 0 placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix {
    values: DistanceMatrix,
    mask: Mask,
}

impl MaskedMatrix {
    /// Keep known entries of `m`, zero the rest.
    pub fn new(m: &DistanceMatrix, mask: Mask) -> Result<Self> {
        if m.n() != mask.n() {
            return Err(Error::shape(m.n(), mask.n()));
        }
        let n = m.n();
        let data = DMatrix::from_fn(n, n, |i, j| if mask.is_known(i, j) { m.get(i, j) } else { 0.0 });
        Ok(Self {
            values: DistanceMatrix {
                data,
                squared: m.squared,
            },
            mask,
        })
    }

    /// As [`MaskedMatrix::new`], additionally requiring every fully known
    /// triple to satisfy the triangle inequality within `tol`.
    pub fn new_strict(m: &DistanceMatrix, mask: Mask, tol: f64) -> Result<Self> {
        let mm = Self::new(m, mask)?;
        if let Some((i, j, k)) = mm.first_triangle_violation(tol) {
            return Err(Error::invalid(format!(
                "known triple ({i},{j},{k}) violates the triangle inequality"
            )));
        }
        Ok(mm)
    }

    fn first_triangle_violation(&self, tol: f64) -> Option<(usize, usize, usize)> {
        let n = self.n();
        let d = |i: usize, j: usize| {
            let v = self.values.get(i, j);
            if self.values.squared {
                v.sqrt()
            } else {
                v
            }
        };
        for i in 0..n {
            for j in i + 1..n {
                if !self.mask.is_known(i, j) {
                    continue;
                }
                for k in 0..n {
                    if k == i || k == j || !self.mask.is_known(i, k) || !self.mask.is_known(k, j) {
                        continue;
                    }
                    if d(i, j) > d(i, k) + d(k, j) + tol {
                        return Some((i, j, k));
                    }
                }
            }
        }
        None
    }

    pub fn n(&self) -> usize {
        self.mask.n()
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Values with zero placeholders at unknown entries.
    pub fn values(&self) -> &DistanceMatrix {
        &self.values
    }

    pub fn known(&self, i: usize, j: usize) -> Option<f64> {
        self.mask.is_known(i, j).then(|| self.values.get(i, j))
    }

    pub fn is_squared(&self) -> bool {
        self.values.squared
    }

    /// Mean of the known entries.
    pub fn mean_known(&self) -> Option<f64> {
        let (sum, count) = self
            .mask
            .known_pairs()
            .fold((0.0, 0usize), |(s, c), (i, j)| (s + self.values.get(i, j), c + 1));
        (count > 0).then(|| sum / count as f64)
    }

    /// Further hide entries, keeping only those also known in `mask`.
    pub fn restrict(&self, mask: &Mask) -> Result<Self> {
        let m = self.mask.intersect(mask)?;
        Self::new(&self.values, m)
    }
}

/// Hide entries of `m` where `b` is zero.
pub fn apply_mask(m: &DistanceMatrix, b: &Mask) -> Result<MaskedMatrix> {
    MaskedMatrix::new(m, b.clone())
}
