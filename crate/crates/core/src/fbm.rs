//! Fractional Brownian motion: exact synthesis and closed-form statistics.
//!
//! Covariance of the process:
//!
//! ```text
//! E[B(s) B(t)] = ½ (t^{2H} + s^{2H} − |t − s|^{2H})
//! ```
//!
//! Trajectories are sampled with the Davies–Harte circulant embedding of the
//! fractional Gaussian noise autocovariance, then integrated.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tolerated negative eigenvalue in the circulant embedding; anything below is an error.
pub const EMBEDDING_TOLERANCE: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbmParams {
    pub hurst: f64,
    /// Typical single-step displacement `a`, so that `<x²(s)> = a² s^{2H}`.
    pub step_scale: f64,
    pub n_points: usize,
    pub dim: usize,
    /// Give every coordinate variance `a² s^{2H}` instead of splitting it over `dim`.
    #[serde(default)]
    pub unit_coordinate_variance: bool,
}

impl FbmParams {
    pub fn new(hurst: f64, n_points: usize) -> Result<Self> {
        let p = Self {
            hurst,
            step_scale: 1.0,
            n_points,
            dim: 3,
            unit_coordinate_variance: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_hurst(self.hurst)?;
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "step_scale must be positive, got {}",
                self.step_scale
            )));
        }
        if self.n_points < 2 {
            return Err(Error::invalid("n_points must be at least 2"));
        }
        if self.dim < 1 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        Ok(())
    }

    /// Standard deviation applied to each coordinate's unit fBm.
    pub fn coordinate_scale(&self) -> f64 {
        if self.unit_coordinate_variance {
            self.step_scale
        } else {
            self.step_scale / (self.dim as f64).sqrt()
        }
    }

    /// Expected squared end-to-end distance of a segment of contour length `s`.
    pub fn mean_squared_distance(&self, s: f64) -> f64 {
        let per_coord = self.coordinate_scale().powi(2) * s.powf(2.0 * self.hurst);
        per_coord * self.dim as f64
    }
}

fn check_hurst(h: f64) -> Result<()> {
    if h > 0.0 && h < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("hurst must lie in (0, 1), got {h}")))
    }
}

/// Ordered points in `dim` dimensions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    coords: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("multiple of dim={dim}"), coords.len()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("trajectory coordinates must be finite"));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(1, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("points have inconsistent dimension"));
        }
        Self::new(dim, points.concat())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }
}

/// `½(t^{2H} + s^{2H} − |t−s|^{2H})`.
pub fn fbm_covariance(h: f64, s: f64, t: f64) -> Result<f64> {
    check_hurst(h)?;
    if s < 0.0 || t < 0.0 {
        return Err(Error::invalid(format!("times must be non-negative, got s={s}, t={t}")));
    }
    let e = 2.0 * h;
    Ok(0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e)))
}

/// Autocovariance of unit fractional Gaussian noise at integer lag `k`.
pub fn fgn_autocovariance(h: f64, k: usize) -> f64 {
    let e = 2.0 * h;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

/// Eigenvalues of the circulant embedding for `m` noise increments (length `2m`).
pub(crate) fn circulant_eigenvalues(h: f64, m: usize, fft: &dyn Fft<f64>) -> Result<Vec<f64>> {
    let len = 2 * m;
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|j| {
            let lag = if j <= m { j } else { len - j };
            Complex::new(fgn_autocovariance(h, lag), 0.0)
        })
        .collect();
    fft.process(&mut buf);
    buf.iter()
        .enumerate()
        .map(|(index, c)| {
            let value = c.re;
            if value < EMBEDDING_TOLERANCE {
                Err(Error::NegativeEigenvalue { index, value })
            } else {
                Ok(value.max(0.0))
            }
        })
        .collect()
}

struct DaviesHarte {
    m: usize,
    /// `sqrt(λ_k / 2m)`
    weights: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl DaviesHarte {
    fn new(h: f64, m: usize) -> Result<Self> {
        let fft = FftPlanner::new().plan_fft_forward(2 * m);
        let eig = circulant_eigenvalues(h, m, fft.as_ref())?;
        let scale = 1.0 / (2 * m) as f64;
        let weights = eig.iter().map(|l| (l * scale).sqrt()).collect();
        Ok(Self { m, weights, fft })
    }

    /// One realization of `m` unit-variance fGn increments.
    fn sample<R: rand::Rng>(&self, rng: &mut R, buf: &mut Vec<Complex<f64>>, out: &mut [f64]) {
        buf.clear();
        buf.extend(self.weights.iter().map(|w| {
            let re = rng::normal(rng);
            let im = rng::normal(rng);
            Complex::new(w * re, w * im)
        }));
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter().take(self.m)) {
            *o = c.re;
        }
    }
}

/// Synthesize `count` independent fBm trajectories starting at the origin.
///
/// Trajectory `i` draws from its own stream of the seeded generator, so the
/// output is identical for any degree of parallelism.
pub fn generate_fbm(params: &FbmParams, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
    params.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let n = params.n_points;
    let dim = params.dim;
    let m = n - 1;
    let dh = DaviesHarte::new(params.hurst, m)?;
    let scale = params.coordinate_scale();

    let trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut buf = Vec::with_capacity(2 * m);
            let mut noise = vec![0.0; m];
            let mut coords = vec![0.0; n * dim];
            for d in 0..dim {
                dh.sample(&mut rng, &mut buf, &mut noise);
                let mut acc = 0.0;
                for (k, dx) in noise.iter().enumerate() {
                    acc += dx;
                    coords[(k + 1) * dim + d] = acc * scale;
                }
            }
            Trajectory { dim, coords }
        })
        .collect();
    Ok(trajectories)
}

/// Ensemble- and time-averaged correlation of increments at `lag`.
///
/// Increments are `D`-dimensional; the correlation is the mean dot product of
/// increments `lag` apart divided by the mean squared increment.
pub fn increment_autocorrelation(trajectories: &[Trajectory], lag: usize) -> Result<f64> {
    let mut cross = 0.0;
    let mut cross_n = 0usize;
    let mut var = 0.0;
    let mut var_n = 0usize;
    for tr in trajectories {
        let n = tr.len();
        if n < lag + 2 {
            continue;
        }
        let incs: Vec<Vec<f64>> = (0..n - 1)
            .map(|i| tr.point(i + 1).iter().zip(tr.point(i)).map(|(a, b)| a - b).collect())
            .collect();
        for w in &incs {
            var += w.iter().map(|v| v * v).sum::<f64>();
            var_n += 1;
        }
        for i in 0..incs.len() - lag {
            cross += dot(&incs[i], &incs[i + lag]);
            cross_n += 1;
        }
    }
    if var_n == 0 || cross_n == 0 {
        return Err(Error::invalid(format!("no trajectory long enough for lag {lag}")));
    }
    let var = var / var_n as f64;
    if var == 0.0 {
        return Err(Error::invalid("increments have zero variance"));
    }
    Ok(cross / cross_n as f64 / var)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian density of the `D`-dimensional displacement between two points `s`
/// apart, evaluated at radius `x`.
pub fn distance_pdf(x: f64, s: f64, params: &FbmParams) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::invalid(format!("contour distance must be positive, got {s}")));
    }
    if x < 0.0 {
        return Err(Error::invalid(format!("distance must be non-negative, got {x}")));
    }
    check_hurst(params.hurst)?;
    let d = params.dim as f64;
    let msd = params.step_scale.powi(2) * s.powf(2.0 * params.hurst);
    Ok((d / (2.0 * PI * msd)).powf(d / 2.0) * (-d * x * x / (2.0 * msd)).exp())
}
