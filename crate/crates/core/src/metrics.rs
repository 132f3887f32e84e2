//! Masked RMSE, Fréchet distance between ensembles, scaling exponents,
//! Gaussian-collapse tests and the FID-versus-database-size fit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::edm::{DistanceMatrix, Mask};
use crate::error::{Error, Result};
use crate::io::PcaeFile;
use crate::rng;

/// Default PCA dimension for the Fréchet embedding.
pub const DEFAULT_PCA_DIM: usize = 64;
/// Kolmogorov quantile for a two-sided test at the 1% level.
pub const KS_CRITICAL_1PCT: f64 = 1.628;

fn squared(m: &DistanceMatrix, i: usize, j: usize) -> f64 {
    let v = m.get(i, j);
    if m.is_squared() {
        v
    } else {
        v * v
    }
}

/// RMSE over the unknown off-diagonal entries of `b`, on raw distances.
pub fn rmse_masked(a_hat: &DistanceMatrix, a_true: &DistanceMatrix, b: &Mask) -> Result<f64> {
    let n = a_true.n();
    if a_hat.n() != n || b.n() != n {
        return Err(Error::shape(n, if a_hat.n() != n { a_hat.n() } else { b.n() }));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, j) in b.unknown_pairs() {
        let d = a_hat.raw_distance(i, j) - a_true.raw_distance(i, j);
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoKnownEntries);
    }
    Ok((sum / count as f64).sqrt())
}

/// Masked RMSE divided by the root mean known squared entry.
pub fn rmse_normalized(a_hat: &DistanceMatrix, a_true: &DistanceMatrix, b: &Mask) -> Result<f64> {
    let rmse = rmse_masked(a_hat, a_true, b)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, j) in b.known_pairs() {
        sum += squared(a_true, i, j);
        count += 1;
    }
    if count == 0 || sum <= 0.0 {
        return Err(Error::NoKnownEntries);
    }
    Ok(rmse / (sum / count as f64).sqrt())
}

/// Fitted PCA projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaEmbedding {
    pub mean: DVector<f64>,
    /// `k × d`, orthonormal rows.
    pub basis: DMatrix<f64>,
}

impl PcaEmbedding {
    pub fn to_file(&self) -> PcaeFile {
        PcaeFile {
            mean: self.mean.iter().copied().collect(),
            basis: self.basis.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn from_file(f: &PcaeFile) -> Result<Self> {
        let d = f.mean.len();
        if f.basis.iter().any(|r| r.len() != d) {
            return Err(Error::Format("PCA basis rows do not match the mean".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(f.mean.clone()),
            basis: DMatrix::from_fn(f.basis.len(), d, |i, j| f.basis[i][j]),
        })
    }

    /// Largest deviation of `basis · basisᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.basis.nrows();
        (&self.basis * self.basis.transpose() - DMatrix::identity(k, k)).amax()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleEmbedding {
    /// Upper triangle of each matrix.
    Identity,
    Pca(PcaEmbedding),
}

/// Strict upper triangle, row by row.
pub fn features(m: &DistanceMatrix) -> Vec<f64> {
    m.upper_triangle()
}

fn feature_matrix(ms: &[DistanceMatrix]) -> Result<DMatrix<f64>> {
    let d = ms.first().map(|m| m.n() * (m.n() - 1) / 2).unwrap_or(0);
    let mut x = DMatrix::zeros(ms.len(), d);
    for (r, m) in ms.iter().enumerate() {
        let f = features(m);
        if f.len() != d {
            return Err(Error::shape(d, f.len()));
        }
        x.row_mut(r).copy_from_slice(&f);
    }
    Ok(x)
}

/// PCA on the upper triangles of `reference`, keeping `dim` components.
pub fn fit_pca(reference: &[DistanceMatrix], dim: usize) -> Result<PcaEmbedding> {
    let x = feature_matrix(reference)?;
    let (m, d) = x.shape();
    if m < 2 || dim == 0 || dim > d.min(m - 1) {
        return Err(Error::invalid(format!(
            "cannot fit {dim} components from {m} samples of dimension {d}"
        )));
    }
    let mean = x.row_mean().transpose();
    let mut c = x;
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let basis = if m < d {
        // eigenvectors of the Gram matrix map to principal axes through Xᵀ
        let eig = SymmetricEigen::new(&c * c.transpose());
        let order = descending(&eig.eigenvalues);
        let mut b = DMatrix::zeros(dim, d);
        for (k, &idx) in order.iter().take(dim).enumerate() {
            let v = c.transpose() * eig.eigenvectors.column(idx);
            let norm = v.norm();
            if norm <= 0.0 {
                return Err(Error::DegenerateFit(
                    "reference ensemble has too few distinct samples".into(),
                ));
            }
            b.row_mut(k).copy_from(&(v / norm).transpose());
        }
        b
    } else {
        let eig = SymmetricEigen::new(c.transpose() * &c);
        let order = descending(&eig.eigenvalues);
        let mut b = DMatrix::zeros(dim, d);
        for (k, &idx) in order.iter().take(dim).enumerate() {
            b.row_mut(k).copy_from(&eig.eigenvectors.column(idx).transpose());
        }
        b
    };
    // re-orthonormalize against rounding in the Gram route
    let q = basis.transpose().qr().q();
    let mut basis = q.transpose();
    for k in 0..dim {
        if basis.row(k).sum() < 0.0 {
            basis.row_mut(k).neg_mut();
        }
    }
    Ok(PcaEmbedding { mean, basis })
}

fn descending(v: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

impl EnsembleEmbedding {
    pub fn dim(&self, n: usize) -> usize {
        match self {
            EnsembleEmbedding::Identity => n * (n - 1) / 2,
            EnsembleEmbedding::Pca(p) => p.basis.nrows(),
        }
    }

    /// One row per matrix.
    pub fn embed(&self, ms: &[DistanceMatrix]) -> Result<DMatrix<f64>> {
        let x = feature_matrix(ms)?;
        match self {
            EnsembleEmbedding::Identity => Ok(x),
            EnsembleEmbedding::Pca(p) => {
                if x.ncols() != p.mean.len() {
                    return Err(Error::shape(p.mean.len(), x.ncols()));
                }
                let mut c = x;
                for mut row in c.row_iter_mut() {
                    row -= p.mean.transpose();
                }
                Ok(c * p.basis.transpose())
            }
        }
    }
}

/// Sample mean and unbiased covariance of the rows.
pub fn moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::invalid("at least two samples are needed for a covariance"));
    }
    let mean = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = c.transpose() * &c / (m - 1) as f64;
    Ok((mean, cov))
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// The trace of `(Σ₁Σ₂)^{1/2}` is taken from the symmetric form
/// `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.
pub fn frechet_from_moments(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::shape(d, mu2.len()));
    }
    let root1 = psd_sqrt(s1)?;
    let mut inner = &root1 * s2 * &root1;
    inner = (&inner + inner.transpose()) * 0.5;
    let spectrum = SymmetricEigen::new(inner).eigenvalues;
    let scale = spectrum.amax().max(f64::MIN_POSITIVE);
    let mut tr_sqrt = 0.0;
    for &l in spectrum.iter() {
        if l < -1e-8 * scale {
            return Err(Error::SqrtFailure {
                spectrum: spectrum.iter().copied().collect(),
            });
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let diff = (mu1 - mu2).norm_squared();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
        return Err(Error::SqrtFailure {
            spectrum: eig.eigenvalues.iter().copied().collect(),
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two embedded ensembles.
pub fn frechet_distance(e1: &[DistanceMatrix], e2: &[DistanceMatrix], emb: &EnsembleEmbedding) -> Result<f64> {
    let n = e1.first().ok_or_else(|| Error::invalid("first ensemble is empty"))?.n();
    let need = emb.dim(n) + 1;
    if e1.len() < need || e2.len() < need {
        return Err(Error::invalid(format!(
            "ensembles of {} and {} matrices are too small for a {}-dimensional embedding",
            e1.len(),
            e2.len(),
            need - 1
        )));
    }
    frechet_embedded(&emb.embed(e1)?, &emb.embed(e2)?)
}

/// Fréchet distance between two sets of embedded rows.
pub fn frechet_embedded(x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<f64> {
    let (m1, s1) = moments(x1)?;
    let (m2, s2) = moments(x2)?;
    frechet_from_moments(&m1, &s1, &m2, &s2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subsampling {
    pub draws: usize,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for Subsampling {
    fn default() -> Self {
        Self {
            draws: 100,
            fraction: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetEstimate {
    pub value: f64,
    /// Mean over subsamples.
    pub mean: f64,
    /// Standard deviation over subsamples.
    pub error: f64,
}

/// Full-ensemble distance plus the spread over random subsamples of each
/// ensemble (draw `k` uses stream `k`).
pub fn frechet_with_error(
    e1: &[DistanceMatrix],
    e2: &[DistanceMatrix],
    emb: &EnsembleEmbedding,
    sub: &Subsampling,
) -> Result<FrechetEstimate> {
    if sub.draws < 2 || !(sub.fraction > 0.0 && sub.fraction <= 1.0) {
        return Err(Error::invalid(
            "subsampling needs at least two draws and a fraction in (0, 1]",
        ));
    }
    let value = frechet_distance(e1, e2, emb)?;
    let x1 = emb.embed(e1)?;
    let x2 = emb.embed(e2)?;
    let k1 = ((e1.len() as f64 * sub.fraction).round() as usize).max(2);
    let k2 = ((e2.len() as f64 * sub.fraction).round() as usize).max(2);
    let mut values = Vec::with_capacity(sub.draws);
    for k in 0..sub.draws as u64 {
        let mut r = rng::stream(sub.seed, k);
        let pick = |x: &DMatrix<f64>, count: usize, r: &mut rand_chacha::ChaCha20Rng| {
            let rows = rand::seq::index::sample(r, x.nrows(), count).into_vec();
            x.select_rows(&rows)
        };
        let a = pick(&x1, k1, &mut r);
        let b = pick(&x2, k2, &mut r);
        values.push(frechet_embedded(&a, &b)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(FrechetEstimate {
        value,
        mean,
        error: var.sqrt(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingEstimate {
    pub h_hat: f64,
    pub intercept: f64,
    /// `(s, x(s))` for every lag `1..n`.
    pub curve: Vec<(usize, f64)>,
    pub window: (usize, usize),
}

/// Root mean squared distance at each contour separation.
pub fn distance_curve(e: &[DistanceMatrix]) -> Result<Vec<(usize, f64)>> {
    let n = e.first().ok_or_else(|| Error::invalid("empty ensemble"))?.n();
    if e.iter().any(|m| m.n() != n) {
        return Err(Error::invalid("ensemble matrices differ in size"));
    }
    Ok((1..n)
        .map(|s| {
            let mut sum = 0.0;
            for m in e {
                sum += (0..n - s).map(|i| squared(m, i, i + s)).sum::<f64>();
            }
            (s, (sum / (e.len() * (n - s)) as f64).sqrt())
        })
        .collect())
}

/// Slope of `log x(s)` against `log s` over the default window `[2, n/4]`.
pub fn scaling_exponent(e: &[DistanceMatrix]) -> Result<ScalingEstimate> {
    let n = e.first().ok_or_else(|| Error::invalid("empty ensemble"))?.n();
    scaling_exponent_window(e, 2, (n / 4).max(3))
}

pub fn scaling_exponent_window(e: &[DistanceMatrix], lo: usize, hi: usize) -> Result<ScalingEstimate> {
    let curve = distance_curve(e)?;
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(s, x)| (lo..=hi).contains(s) && *x > 0.0)
        .map(|&(s, x)| ((s as f64).ln(), x.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::invalid(format!(
            "fit window [{lo}, {hi}] holds fewer than two lags"
        )));
    }
    let (slope, intercept) = least_squares_line(&pts);
    Ok(ScalingEstimate {
        h_hat: slope,
        intercept,
        curve,
        window: (lo, hi),
    })
}

fn least_squares_line(pts: &[(f64, f64)]) -> (f64, f64) {
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseTest {
    pub s: usize,
    pub samples: usize,
    pub ks: f64,
    pub critical: f64,
    pub p_value: f64,
    pub passed: bool,
}

/// Kolmogorov survival function `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let m = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / m).max((k + 1) as f64 / m - f)
        })
        .fold(0.0, f64::max)
}

/// Compare `dim · x²(s) / ⟨x²(s)⟩` with the chi-squared law on `dim` degrees
/// of freedom.
///
/// Matrix `k` contributes the single pair `(i, i + s)` with
/// `i = k mod (n − s)`, so the pooled samples are independent.
pub fn gaussian_collapse(e: &[DistanceMatrix], s_values: &[usize], dim: usize) -> Result<Vec<CollapseTest>> {
    if s_values.is_empty() {
        return Ok(Vec::new());
    }
    let n = e.first().ok_or_else(|| Error::invalid("empty ensemble"))?.n();
    let law = ChiSquared::new(dim as f64).map_err(|err| Error::invalid(err.to_string()))?;
    s_values
        .iter()
        .map(|&s| {
            if s == 0 || s >= n {
                return Err(Error::invalid(format!("separation {s} outside 1..{n}")));
            }
            let mut xs: Vec<f64> = e
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let i = k % (n - s);
                    squared(m, i, i + s)
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            if mean <= 0.0 {
                return Err(Error::DegenerateFit(format!("all distances at s = {s} are zero")));
            }
            xs.iter_mut().for_each(|v| *v *= dim as f64 / mean);
            let ks = ks_statistic(&mut xs, |x| law.cdf(x));
            let m = xs.len() as f64;
            let critical = KS_CRITICAL_1PCT / m.sqrt();
            Ok(CollapseTest {
                s,
                samples: xs.len(),
                ks,
                critical,
                p_value: kolmogorov_sf(ks * m.sqrt()),
                passed: ks < critical,
            })
        })
        .collect()
}

/// Reference FID for extrapolating the effective database size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidReference {
    pub fid: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidScalingFit {
    pub a: f64,
    pub gamma: f64,
    /// Natural-log intercept `c` in `ln FID = a ln μ − γ ln M + c`.
    pub intercept: f64,
    /// `log10 M*` where the rescaled fit `FID / μ^a` meets the reference.
    pub log10_m_star: Option<f64>,
    pub residuals: Vec<f64>,
}

/// Least squares for `ln FID = a ln μ − γ ln M + c`.
pub fn fid_scaling_fit(points: &[(f64, f64, f64)], reference: Option<FidReference>) -> Result<FidScalingFit> {
    if points.len() < 4 {
        return Err(Error::invalid(format!("need at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|&(m, mu, f)| !(m > 0.0 && mu > 0.0 && f > 0.0)) {
        return Err(Error::invalid("database sizes, sparsities and FIDs must be positive"));
    }
    let rows = points.len();
    let x = DMatrix::from_fn(rows, 3, |r, c| match c {
        0 => points[r].1.ln(),
        1 => -points[r].0.ln(),
        _ => 1.0,
    });
    let y = DVector::from_iterator(rows, points.iter().map(|p| p.2.ln()));
    let xtx = x.transpose() * &x;
    let eig = SymmetricEigen::new(xtx.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    if lo <= 1e-12 * hi {
        return Err(Error::DegenerateFit(
            "design matrix is rank deficient (need several sparsities and database sizes)".into(),
        ));
    }
    // QR on the design keeps the fit exact to rounding on noiseless data
    let qr = x.clone().qr();
    let beta = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * &y))
        .ok_or_else(|| Error::DegenerateFit("singular design".into()))?;
    let (a, gamma, c) = (beta[0], beta[1], beta[2]);
    let residuals = (&y - &x * &beta).iter().copied().collect();
    let log10_m_star = match reference {
        Some(r) => {
            if !(r.fid > 0.0 && r.mu > 0.0) {
                return Err(Error::invalid("reference FID and sparsity must be positive"));
            }
            if gamma == 0.0 {
                return Err(Error::DegenerateFit("gamma is zero; no finite crossing".into()));
            }
            let level = r.fid.ln() - a * r.mu.ln();
            Some((c - level) / gamma / std::f64::consts::LN_10)
        }
        None => None,
    };
    Ok(FidScalingFit {
        a,
        gamma,
        intercept: c,
        log10_m_star,
        residuals,
    })
}

/// `2(n − 1)(ln √(2π) + ½) / ln 10`.
pub fn theoretical_m_star(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("n must be at least 2"));
    }
    let per = (2.0 * std::f64::consts::PI).sqrt().ln() + 0.5;
    Ok(2.0 * (n - 1) as f64 * per / std::f64::consts::LN_10)
}
