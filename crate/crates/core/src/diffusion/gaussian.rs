//! Gaussian image ensembles and their exact noise predictor.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{EpsilonPredictor, NoiseSchedule, NormalizationSpec};
use crate::edm::DistanceMatrix;
use crate::error::{Error, Result};
use crate::rng;

const PSD_TOL: f64 = 1e-8;

/// Multivariate normal over flattened `n × n` images.
#[derive(Debug, Clone)]
pub struct GaussianEnsembleSpec {
    n: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl GaussianEnsembleSpec {
    /// `cov` must be symmetric and PSD within a relative 1e-8; tiny negative
    /// eigenvalues are clamped to 0.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let n = (d as f64).sqrt().round() as usize;
        if n * n != d || d == 0 {
            return Err(Error::shape("a square image length", d));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::shape(
                format!("{d}x{d}"),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        let asym = (&cov - cov.transpose()).amax();
        if asym > PSD_TOL * scale {
            return Err(Error::invalid(format!(
                "covariance is not symmetric (max deviation {asym:e})"
            )));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig =
            SymmetricEigen::try_new(sym.clone(), f64::EPSILON, 0).ok_or(Error::SqrtFailure { spectrum: vec![] })?;
        let lmax = eig.eigenvalues.max().max(0.0);
        if eig.eigenvalues.min() < -PSD_TOL * lmax.max(f64::MIN_POSITIVE) {
            return Err(Error::SqrtFailure {
                spectrum: eig.eigenvalues.iter().copied().collect(),
            });
        }
        Ok(Self {
            n,
            mean: DVector::from_vec(mean),
            cov: sym,
            eigenvalues: eig.eigenvalues.map(|l| l.max(0.0)),
            eigenvectors: eig.eigenvectors,
        })
    }

    /// Sample mean and unbiased covariance of flattened images.
    pub fn fit<I>(samples: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[f64]>,
    {
        let rows: Vec<DVector<f64>> = samples
            .into_iter()
            .map(|s| DVector::from_column_slice(s.as_ref()))
            .collect();
        let count = rows.len();
        if count < 2 {
            return Err(Error::DegenerateFit("need at least two samples".into()));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::shape(d, bad.len()));
        }
        let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / count as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &rows {
            let c = r - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (count - 1) as f64;
        Self::new(mean.iter().copied().collect(), cov)
    }

    /// Fit to normalized distance matrices.
    pub fn fit_matrices<I>(matrices: I, norm: &NormalizationSpec) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Borrow<DistanceMatrix>,
    {
        Self::fit(matrices.into_iter().map(|m| {
            m.borrow()
                .to_row_major()
                .into_iter()
                .map(|v| norm.normalize(v))
                .collect::<Vec<_>>()
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Eigenvalues of the covariance (clamped at 0).
    pub fn spectrum(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Independent draws; draw `k` uses stream `k` of `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = self.dim();
        let root = self.eigenvalues.map(f64::sqrt);
        (0..count)
            .map(|k| {
                let mut r = rng::stream(seed, k as u64);
                let mut z = DVector::zeros(d);
                rng::fill_normal(&mut r, z.as_mut_slice());
                let x = &self.mean + &self.eigenvectors * z.component_mul(&root);
                x.iter().copied().collect()
            })
            .collect()
    }

    /// Mean and covariance of the unknown entries given the known ones,
    /// unknown entries in index order.
    pub fn conditional(&self, known: &[bool], values: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        if known.len() != d || values.len() != d {
            return Err(Error::shape(d, known.len().max(values.len())));
        }
        let k: Vec<usize> = (0..d).filter(|&i| known[i]).collect();
        let u: Vec<usize> = (0..d).filter(|&i| !known[i]).collect();
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.cov[(rows[a], cols[b])])
        };
        let s_uu = sub(&u, &u);
        if k.is_empty() {
            return Ok((DVector::from_iterator(u.len(), u.iter().map(|&i| self.mean[i])), s_uu));
        }
        let s_uk = sub(&u, &k);
        let s_kk = sub(&k, &k);
        let chol = s_kk
            .cholesky()
            .ok_or_else(|| Error::DegenerateFit("known-entry covariance is singular".into()))?;
        let resid = DVector::from_iterator(k.len(), k.iter().map(|&i| values[i] - self.mean[i]));
        let mean_u = DVector::from_iterator(u.len(), u.iter().map(|&i| self.mean[i])) + &s_uk * chol.solve(&resid);
        let cov_u = &s_uu - &s_uk * chol.solve(&s_uk.transpose());
        Ok((mean_u, cov_u))
    }
}

/// Exact minimum-MSE noise predictor for a Gaussian ensemble:
/// `ε̂ = Q diag(√(1−ᾱ)/(ᾱλ + 1 − ᾱ)) Qᵀ (x − √ᾱ m)`.
#[derive(Debug, Clone)]
pub struct AnalyticEpsilon {
    spec: GaussianEnsembleSpec,
    schedule: NoiseSchedule,
}

/// Oracle predictor for `spec` under the training chain `s`.
pub fn analytic_epsilon(spec: &GaussianEnsembleSpec, s: &NoiseSchedule) -> AnalyticEpsilon {
    AnalyticEpsilon {
        spec: spec.clone(),
        schedule: s.clone(),
    }
}

impl AnalyticEpsilon {
    pub fn spec(&self) -> &GaussianEnsembleSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// `E[x0 | x_t]`.
    pub fn posterior_mean(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let ab = self.schedule.alpha_bar_at(t)?;
        let eps = self.predict(x, t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x.iter().zip(&eps).map(|(x, e)| (x - b * e) / a).collect())
    }
}

impl EpsilonPredictor for AnalyticEpsilon {
    fn size(&self) -> usize {
        self.spec.n
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let d = self.spec.dim();
        if x.len() != d {
            return Err(Error::shape(d, x.len()));
        }
        let ab = self.schedule.alpha_bar_at(t)?;
        let root_ab = ab.sqrt();
        let root_one = (1.0 - ab).sqrt();
        let q = &self.spec.eigenvectors;
        let centered = DVector::from_iterator(d, x.iter().zip(self.spec.mean.iter()).map(|(x, m)| x - root_ab * m));
        let mut proj = q.tr_mul(&centered);
        for (p, l) in proj.iter_mut().zip(self.spec.eigenvalues.iter()) {
            *p *= root_one / (ab * l + 1.0 - ab);
        }
        Ok((q * proj).iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::default_schedule;

    fn random_spec(n: usize, seed: u64) -> GaussianEnsembleSpec {
        let d = n * n;
        let mut r = rng::stream(seed, 99);
        let w = DMatrix::from_fn(d, d, |_, _| rng::normal(&mut r));
        let cov = &w * w.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05;
        let mean = (0..d).map(|_| rng::normal(&mut r)).collect();
        GaussianEnsembleSpec::new(mean, cov).unwrap()
    }

    #[test]
    fn identity_covariance_closed_form() {
        let s = default_schedule();
        let spec = GaussianEnsembleSpec::new(vec![0.0; 4], DMatrix::identity(4, 4)).unwrap();
        let p = analytic_epsilon(&spec, &s);
        let x = [0.3, -1.0, 2.0, 0.0];
        for t in [1, 250, 1000] {
            let e = p.predict(&x, t).unwrap();
            let f = (1.0 - s.alpha_bar(t - 1)).sqrt();
            for (a, b) in e.iter().zip(&x) {
                assert!((a - f * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_noise_limit() {
        let s = crate::diffusion::linear_schedule(50, 0.5, 0.9).unwrap();
        let spec = random_spec(2, 1);
        let p = analytic_epsilon(&spec, &s);
        let x = [1.0, 2.0, -1.0, 0.5];
        let e = p.predict(&x, 50).unwrap();
        assert!(s.alpha_bar(49) < 1e-20);
        for (a, b) in e.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_formula() {
        let s = default_schedule();
        let spec = random_spec(3, 2);
        let p = analytic_epsilon(&spec, &s);
        let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.1 - 0.4).collect();
        let t = 123;
        let ab = s.alpha_bar(t - 1);
        let d = 9;
        let sig = spec.cov();
        let m = spec.mean();
        let xv = DVector::from_vec(x.clone());
        let inner = (sig * ab + DMatrix::identity(d, d) * (1.0 - ab)).try_inverse().unwrap();
        let x0 = m + sig * ab.sqrt() * &inner * (&xv - m * ab.sqrt());
        let eps = (&xv - x0 * ab.sqrt()) / (1.0 - ab).sqrt();
        let got = p.predict(&x, t).unwrap();
        for k in 0..d {
            assert!((got[k] - eps[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn agrees_with_empirical_regression() {
        // ordinary least squares of ε on (x_t, 1) over simulated pairs
        let s = default_schedule();
        let spec = random_spec(4, 3);
        let p = analytic_epsilon(&spec, &s);
        let t = 400;
        let ab = s.alpha_bar(t - 1);
        let mut r = rng::stream(5, 0);
        let mut xtx = DMatrix::<f64>::zeros(17, 17);
        let mut xte = DMatrix::<f64>::zeros(17, 16);
        for x0 in spec.sample(100_000, 4) {
            let mut e = vec![0.0; 16];
            rng::fill_normal(&mut r, &mut e);
            let mut row = DVector::from_element(17, 1.0);
            for k in 0..16 {
                row[k] = ab.sqrt() * x0[k] + (1.0 - ab).sqrt() * e[k];
            }
            xtx.ger(1.0, &row, &row, 1.0);
            xte += &row * DVector::from_vec(e).transpose();
        }
        let coef = xtx.cholesky().unwrap().solve(&xte);

        let probe = spec.sample(2000, 6);
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        let hats: Vec<Vec<f64>> = probe
            .iter()
            .map(|x0| {
                let xt: Vec<f64> = x0.iter().map(|v| ab.sqrt() * v).collect();
                p.predict(&xt, t).unwrap()
            })
            .collect();
        let mean: f64 = hats.iter().flatten().sum::<f64>() / (hats.len() * 16) as f64;
        for (x0, hat) in probe.iter().zip(&hats) {
            let mut row = DVector::from_element(17, 1.0);
            for k in 0..16 {
                row[k] = ab.sqrt() * x0[k];
            }
            let fitted = coef.tr_mul(&row);
            for k in 0..16 {
                ss_res += (hat[k] - fitted[k]).powi(2);
                ss_tot += (hat[k] - mean).powi(2);
            }
        }
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.999, "{r2}");
    }

    #[test]
    fn fit_recovers_moments() {
        let spec = random_spec(2, 7);
        let samples = spec.sample(50_000, 8);
        let fitted = GaussianEnsembleSpec::fit(&samples).unwrap();
        assert!((fitted.mean() - spec.mean()).amax() < 0.05);
        assert!((fitted.cov() - spec.cov()).amax() < 0.05);
        assert!(GaussianEnsembleSpec::fit(&samples[..1]).is_err());
    }

    #[test]
    fn rejects_bad_covariance() {
        let mut c = DMatrix::identity(4, 4);
        c[(0, 0)] = -1.0;
        assert!(matches!(
            GaussianEnsembleSpec::new(vec![0.0; 4], c),
            Err(Error::SqrtFailure { .. })
        ));
        let mut c = DMatrix::identity(4, 4);
        c[(0, 1)] = 0.5;
        assert!(GaussianEnsembleSpec::new(vec![0.0; 4], c).is_err());
        assert!(GaussianEnsembleSpec::new(vec![0.0; 3], DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn conditional_of_independent_entries() {
        let spec = GaussianEnsembleSpec::new(vec![1.0, 2.0, 3.0, 4.0], DMatrix::identity(4, 4)).unwrap();
        let (m, c) = spec
            .conditional(&[true, false, true, false], &[9.0, 0.0, 9.0, 0.0])
            .unwrap();
        assert_eq!(m.as_slice(), &[2.0, 4.0]);
        assert_eq!(c, DMatrix::identity(2, 2));
    }
}
