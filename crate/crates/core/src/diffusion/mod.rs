//! Noise schedules, the epsilon-predictor contract, observations and the
//! reverse-process samplers.
//!
//! Images are `n × n` matrices flattened row-major.

mod gaussian;
mod masked;
mod samplers;
pub mod unet;
pub mod weights;

pub use gaussian::{analytic_epsilon, AnalyticEpsilon, GaussianEnsembleSpec};
pub use masked::{diffusion_complete, DiffusionCompletion, DiffusionModel};
pub use samplers::{
    ddnm_inpaint, ddpm_inpaint, ddpm_sample, ddrm_inpaint, inpaint, inpaint_batch, repaint_inpaint, sample_indexed,
    time_travel_levels, InpaintMethod,
};

use serde::{Deserialize, Serialize};

use crate::edm::{DistanceMatrix, MaskedMatrix};
use crate::error::{Error, Result};

/// Variance-preserving noise schedule.
///
/// `timesteps[i]` is the step in the training chain that position `i`
/// corresponds to (1-based); it is the `t` passed to the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let timesteps = (1..=betas.len()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            timesteps,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `β` at position `i` (0-based).
    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        1.0 - self.betas[i]
    }

    /// `ᾱ` at position `i`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i]
    }

    /// `ᾱ` one position earlier, 1 before the first step.
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bars[i - 1]
        }
    }

    /// `ᾱ` at training step `t` (1-based) of this chain.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t >= 1 && self.timesteps.get(t - 1) == Some(&t) {
            return Ok(self.alpha_bars[t - 1]);
        }
        self.timesteps
            .iter()
            .position(|&s| s == t)
            .map(|i| self.alpha_bars[i])
            .ok_or_else(|| Error::invalid(format!("timestep {t} not in schedule")))
    }

    /// Posterior standard deviation at position `i`.
    pub fn sigma(&self, i: usize, kind: PosteriorVariance) -> f64 {
        match kind {
            PosteriorVariance::Beta => self.betas[i].sqrt(),
            PosteriorVariance::BetaTilde => {
                ((1.0 - self.alpha_bar_prev(i)) / (1.0 - self.alpha_bars[i]) * self.betas[i]).sqrt()
            }
        }
    }
}

/// Linearly spaced betas.
pub fn linear_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// The default training chain: T = 1000, betas 1e-4 to 0.02.
pub fn default_schedule() -> NoiseSchedule {
    linear_schedule(1000, 1e-4, 0.02).expect("valid constants")
}

/// Keep positions `indices` (1-based, strictly ascending) of `s`, with
/// `β_i = 1 − ᾱ_{S_i}/ᾱ_{S_{i−1}}` so the marginals are unchanged.
pub fn subsample_schedule(s: &NoiseSchedule, indices: &[usize]) -> Result<NoiseSchedule> {
    if indices.is_empty() {
        return Err(Error::invalid("no indices given"));
    }
    let mut prev = 0;
    for &k in indices {
        if k <= prev || k > s.len() {
            return Err(Error::invalid(format!(
                "indices must be strictly ascending within 1..={}",
                s.len()
            )));
        }
        prev = k;
    }
    let mut betas = Vec::with_capacity(indices.len());
    let mut alpha_bars = Vec::with_capacity(indices.len());
    let mut timesteps = Vec::with_capacity(indices.len());
    let mut last = 1.0;
    for &k in indices {
        let ab = s.alpha_bars[k - 1];
        betas.push(1.0 - ab / last);
        alpha_bars.push(ab);
        timesteps.push(s.timesteps[k - 1]);
        last = ab;
    }
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        timesteps,
    })
}

/// `S_i = round(i·T/steps)` for `i = 1..=steps`.
pub fn uniform_indices(t: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t {
        return Err(Error::invalid(format!("steps must lie in 1..={t}, got {steps}")));
    }
    Ok((1..=steps).map(|i| (i * t + steps / 2) / steps).collect())
}

/// `√ᾱ_t x0 + √(1−ᾱ_t) noise` with `t` a 1-based position of `s`.
pub fn forward_noise(x0: &[f64], t: usize, s: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::shape(x0.len(), noise.len()));
    }
    if t == 0 || t > s.len() {
        return Err(Error::invalid(format!("t must lie in 1..={}", s.len())));
    }
    let ab = s.alpha_bars[t - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Noise predictor `ε_θ(x_t, t)`.
pub trait EpsilonPredictor: Send + Sync {
    /// Image side length `n`.
    fn size(&self) -> usize;

    /// Predicted noise for `x` (length `n²`) at training step `t` (1-based).
    /// Must be deterministic.
    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorVariance {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = β_t (1−ᾱ_{t−1})/(1−ᾱ_t)`
    BetaTilde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub repaint_resamples: usize,
    pub ddnm_travel_length: usize,
    pub ddnm_repeats: usize,
    pub ddrm_eta: f64,
    pub ddrm_sigma_y: f64,
    pub posterior: PosteriorVariance,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            repaint_resamples: 10,
            ddnm_travel_length: 3,
            ddnm_repeats: 3,
            ddrm_eta: 0.85,
            ddrm_sigma_y: 0.0,
            posterior: PosteriorVariance::Beta,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.repaint_resamples == 0 || self.ddnm_travel_length == 0 || self.ddnm_repeats == 0 {
            return Err(Error::invalid(
                "steps, resamples, travel length and repeats must be at least 1",
            ));
        }
        if !(self.ddrm_eta > 0.0 && self.ddrm_eta <= 1.0) {
            return Err(Error::invalid(format!(
                "ddrm_eta must lie in (0, 1], got {}",
                self.ddrm_eta
            )));
        }
        if !(self.ddrm_sigma_y >= 0.0 && self.ddrm_sigma_y.is_finite()) {
            return Err(Error::invalid("ddrm_sigma_y must be non-negative"));
        }
        Ok(())
    }

    /// Uniformly subsample the training chain to `steps` positions.
    pub fn chain(&self, trained: &NoiseSchedule) -> Result<NoiseSchedule> {
        subsample_schedule(trained, &uniform_indices(trained.len(), self.steps)?)
    }
}

/// Affine map between squared distances and model space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mu: f64,
    pub sigma: f64,
    pub hurst: f64,
    pub n: usize,
}

impl NormalizationSpec {
    pub fn identity(n: usize) -> Self {
        Self {
            mu: 0.0,
            sigma: 1.0,
            hurst: 0.5,
            n,
        }
    }

    /// Statistics of all entries of the given matrices.
    pub fn fit<I>(matrices: I, hurst: f64) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: std::borrow::Borrow<DistanceMatrix>,
    {
        use std::borrow::Borrow;
        let (mut sum, mut sq, mut count, mut n) = (0.0, 0.0, 0usize, None);
        for m in matrices {
            let m = m.borrow();
            if *n.get_or_insert(m.n()) != m.n() {
                return Err(Error::shape(n.unwrap_or(0), m.n()));
            }
            for v in m.matrix().iter() {
                sum += v;
                sq += v * v;
                count += 1;
            }
        }
        let n = n.ok_or_else(|| Error::invalid("no matrices to fit"))?;
        let mu = sum / count as f64;
        let sigma = (sq / count as f64 - mu * mu).max(0.0).sqrt();
        if sigma <= 0.0 {
            return Err(Error::DegenerateFit("matrices have zero spread".into()));
        }
        Ok(Self { mu, sigma, hurst, n })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return Err(Error::invalid("normalization needs finite mu and positive sigma"));
        }
        Ok(())
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mu) / self.sigma
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.sigma + self.mu
    }
}

/// A partially known image in model space.
///
/// Unlike [`MaskedMatrix`], values may be negative and the known set need
/// not be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    n: usize,
    values: Vec<f64>,
    known: Vec<bool>,
}

impl Observation {
    /// Unknown values are replaced by 0.
    pub fn new(n: usize, values: Vec<f64>, known: Vec<bool>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape(n * n, values.len()));
        }
        if known.len() != n * n {
            return Err(Error::shape(n * n, known.len()));
        }
        let values: Vec<f64> = values
            .iter()
            .zip(&known)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("known values must be finite"));
        }
        Ok(Self { n, values, known })
    }

    /// Nothing known.
    pub fn unknown(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
            known: vec![false; n * n],
        }
    }

    /// Normalize a masked EDM. The diagonal is known (zero distance) when
    /// `diagonal_known` is set.
    pub fn from_masked(pm: &MaskedMatrix, norm: &NormalizationSpec, diagonal_known: bool) -> Result<Self> {
        norm.validate()?;
        let n = pm.n();
        let mut values = vec![0.0; n * n];
        let mut known = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = if i == j {
                    diagonal_known
                } else {
                    pm.mask().is_known(i, j)
                };
                if k {
                    known[i * n + j] = true;
                    values[i * n + j] = norm.normalize(pm.values().get(i, j));
                }
            }
        }
        Self::new(n, values, known)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn is_known(&self, k: usize) -> bool {
        self.known[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PostprocessReport {
    /// Largest `|x_ij − x_ji|` before symmetrization (denormalized units).
    pub max_asymmetry: f64,
    /// Largest magnitude of a negative entry clipped to 0.
    pub max_clipped: f64,
    /// Largest magnitude of a diagonal entry set to 0.
    pub max_diagonal: f64,
}

/// Denormalize, symmetrize, zero the diagonal and clip negatives.
pub fn postprocess_edm(raw: &[f64], norm: &NormalizationSpec) -> Result<(DistanceMatrix, PostprocessReport)> {
    let n = (raw.len() as f64).sqrt().round() as usize;
    if n * n != raw.len() {
        return Err(Error::shape("square image", raw.len()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("raw image has non-finite entries"));
    }
    let x: Vec<f64> = raw.iter().map(|&v| norm.denormalize(v)).collect();
    let mut report = PostprocessReport::default();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        report.max_diagonal = report.max_diagonal.max(x[i * n + i].abs());
        for j in i + 1..n {
            let (a, b) = (x[i * n + j], x[j * n + i]);
            report.max_asymmetry = report.max_asymmetry.max((a - b).abs());
            let mut v = 0.5 * (a + b);
            if v < 0.0 {
                report.max_clipped = report.max_clipped.max(-v);
                v = 0.0;
            }
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok((DistanceMatrix::new(m, true)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(0), 0.5);
        let s = default_schedule();
        // direct product
        let mut p = 1.0f64;
        for i in 0..1000 {
            p *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(999) - p).abs() < 1e-15);
        assert!((s.alpha_bar(999) - 4.04e-5).abs() < 0.01e-5);
        assert!(s.alpha_bar(999).sqrt() < 0.01);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(linear_schedule(10, 0.2, 0.1).is_err());
        assert!(linear_schedule(10, 0.0, 0.1).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn subsampling() {
        let s = default_schedule();
        let full: Vec<usize> = (1..=1000).collect();
        let same = subsample_schedule(&s, &full).unwrap();
        for (a, b) in same.betas().iter().zip(s.betas()) {
            assert!((a - b).abs() < 1e-12);
        }
        let last = subsample_schedule(&s, &[1000]).unwrap();
        assert_eq!(last.alpha_bar(0), s.alpha_bar(999));
        assert_eq!(last.timesteps(), &[1000]);

        let idx = vec![3, 17, 140, 141, 600, 999];
        let sub = subsample_schedule(&s, &idx).unwrap();
        let mut p = 1.0;
        for (i, &k) in idx.iter().enumerate() {
            p *= 1.0 - sub.beta(i);
            assert!((p - s.alpha_bar(k - 1)).abs() < 1e-10);
        }
        assert!(subsample_schedule(&s, &[5, 5]).is_err());
        assert!(subsample_schedule(&s, &[0]).is_err());
        assert!(subsample_schedule(&s, &[1001]).is_err());

        let idx = uniform_indices(1000, 200).unwrap();
        assert_eq!(idx[0], 5);
        assert_eq!(idx[199], 1000);
        assert_eq!(uniform_indices(1000, 1000).unwrap(), full);
        let nested = subsample_schedule(&subsample_schedule(&s, &idx).unwrap(), &[2, 200]).unwrap();
        assert_eq!(nested.timesteps(), &[10, 1000]);
        assert_eq!(nested.alpha_bar_at(10).unwrap(), s.alpha_bar(9));
    }

    #[test]
    fn forward_noise_examples() {
        let s = linear_schedule(3, 1e-12, 1e-12).unwrap();
        let x0 = vec![1.0, -2.0];
        let out = forward_noise(&x0, 1, &s, &[5.0, 5.0]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] + 2.0).abs() < 1e-5);
        let s = default_schedule();
        let out = forward_noise(&x0, 500, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(out[0], s.alpha_bar(499).sqrt());
        assert!(forward_noise(&x0, 0, &s, &[0.0, 0.0]).is_err());
        assert!(forward_noise(&x0, 1, &s, &[0.0]).is_err());
    }

    #[test]
    fn forward_noise_variance() {
        let s = default_schedule();
        let t = 300;
        let mut r = crate::rng::stream(5, 0);
        let draws = 10_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..draws {
            let e = [crate::rng::normal(&mut r)];
            let v = forward_noise(&[0.0], t, &s, &e).unwrap()[0];
            acc += v * v;
            acc2 += v.powi(4);
        }
        let var = acc / draws as f64;
        let se = ((acc2 / draws as f64 - var * var) / draws as f64).sqrt();
        let expected = 1.0 - s.alpha_bar(t - 1);
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected} (se {se})");
    }

    #[test]
    fn postprocess_examples() {
        let norm = NormalizationSpec::identity(3);
        let valid = [0., 1., 4., 1., 0., 1., 4., 1., 0.];
        let (m, r) = postprocess_edm(&valid, &norm).unwrap();
        assert_eq!(m.to_row_major(), valid.to_vec());
        assert_eq!(r, PostprocessReport::default());

        let raw = [0.5, 1., -3., 2., 0., 1., -1., 1., 0.];
        let (m, r) = postprocess_edm(&raw, &norm).unwrap();
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(r.max_asymmetry, 2.0);
        assert_eq!(r.max_clipped, 2.0);
        assert_eq!(r.max_diagonal, 0.5);
        assert!(m.validate(&Default::default()).is_structurally_valid());

        let scaled = NormalizationSpec {
            mu: 2.0,
            sigma: 3.0,
            hurst: 0.5,
            n: 2,
        };
        let (m, _) = postprocess_edm(&[-2.0 / 3.0, 1.0, 1.0, -2.0 / 3.0], &scaled).unwrap();
        assert_eq!(m.get(0, 1), 5.0);
        assert!(postprocess_edm(&[0.0; 3], &norm).is_err());
    }

    #[test]
    fn observation_from_masked() {
        let m = DistanceMatrix::from_rows(&[vec![0., 1.], vec![1., 0.]]).unwrap();
        let pm = crate::edm::apply_mask(&m, &crate::edm::Mask::all_known(2)).unwrap();
        let norm = NormalizationSpec {
            mu: 1.0,
            sigma: 2.0,
            hurst: 0.5,
            n: 2,
        };
        let o = Observation::from_masked(&pm, &norm, true).unwrap();
        assert_eq!(o.values(), &[-0.5, 0.0, 0.0, -0.5]);
        assert!(o.known().iter().all(|&k| k));
        let o = Observation::from_masked(&pm, &norm, false).unwrap();
        assert_eq!(o.known(), &[false, true, true, false]);
    }
}
