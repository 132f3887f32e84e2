//! Classical completion: FISTA nuclear-norm minimization, trajectory
//! optimization, nearest-neighbor fill, database search and ensemble mean.

use std::borrow::Borrow;

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edm::{edm_from_trajectory, realize, DistanceMatrix, MaskedMatrix, RealizeMode, SCHOENBERG_TOL};
use crate::error::{Error, Result};
use crate::fbm::Trajectory;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fista,
    Opt,
    Nn,
    DbSearch,
    EnsembleMean,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fista => "fista",
            Method::Opt => "opt",
            Method::Nn => "nn",
            Method::DbSearch => "db-search",
            Method::EnsembleMean => "ensemble-mean",
        }
    }
}

/// Index-space distance used by [`nn_complete`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NnMetric {
    #[default]
    Manhattan,
    Chebyshev,
}

impl NnMetric {
    fn eval(self, di: usize, dj: usize) -> usize {
        match self {
            NnMetric::Manhattan => di + dj,
            NnMetric::Chebyshev => di.max(dj),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub method: Method,
    /// Absolute shrinkage; when absent, `beta_scale` times the mean known entry.
    pub beta: Option<f64>,
    pub beta_scale: f64,
    pub fista_tol: f64,
    pub fista_max_iter: usize,
    /// Halve β at each convergence until it falls below this fraction of the
    /// starting value. `None` runs a single stage at fixed β.
    pub fista_continuation: Option<f64>,
    pub opt_steps: usize,
    pub opt_lr: f64,
    /// Learning rate reached at the last step by cosine decay, as a fraction of `opt_lr`.
    pub opt_lr_floor: f64,
    pub opt_dim: usize,
    pub opt_restarts: usize,
    pub nn_metric: NnMetric,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            method: Method::Fista,
            beta: None,
            beta_scale: 0.1,
            fista_tol: 1e-7,
            fista_max_iter: 5000,
            fista_continuation: Some(1e-6),
            opt_steps: 5000,
            opt_lr: 0.05,
            opt_lr_floor: 1e-3,
            opt_dim: 3,
            opt_restarts: 1,
            nn_metric: NnMetric::Manhattan,
        }
    }
}

impl CompletionConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if let Some(b) = self.beta {
            positive(b, "beta")?;
        }
        positive(self.beta_scale, "beta_scale")?;
        positive(self.fista_tol, "fista_tol")?;
        positive(self.opt_lr, "opt_lr")?;
        if !(self.opt_lr_floor > 0.0 && self.opt_lr_floor <= 1.0) {
            return Err(Error::invalid("opt_lr_floor must lie in (0, 1]"));
        }
        if let Some(c) = self.fista_continuation {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::invalid("fista_continuation must lie in (0, 1)"));
            }
        }
        if self.fista_max_iter == 0 || self.opt_steps == 0 || self.opt_dim == 0 || self.opt_restarts == 0 {
            return Err(Error::invalid("iteration counts and opt_dim must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompletionResult {
    pub completed: DistanceMatrix,
    pub iterations: usize,
    pub final_loss: f64,
    pub method: Method,
    /// Unknown entries filled by the nearest-neighbor fallback (ensemble mean).
    pub fallback_entries: usize,
    /// Database index used (database search).
    pub matched_index: Option<usize>,
    /// Objective after each iteration (FISTA).
    pub loss_history: Vec<f64>,
}

impl CompletionResult {
    fn new(completed: DistanceMatrix, method: Method) -> Self {
        Self {
            completed,
            iterations: 0,
            final_loss: 0.0,
            method,
            fallback_entries: 0,
            matched_index: None,
            loss_history: Vec::new(),
        }
    }
}

fn require_known(pm: &MaskedMatrix) -> Result<()> {
    if pm.mask().known_pairs().next().is_none() {
        return Err(Error::NoKnownEntries);
    }
    Ok(())
}

/// Singular value soft-thresholding `U (Σ − βI)₊ Vᵀ`.
pub fn soft_threshold(a: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    if beta < 0.0 || beta.is_nan() {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0).ok_or(Error::SvdFailure { iteration: 0 })?;
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::SvdFailure { iteration: 0 });
    };
    let shrunk = svd.singular_values.map(|s| (s - beta).max(0.0));
    Ok(u * DMatrix::from_diagonal(&shrunk) * v_t)
}

/// Soft-thresholding of a symmetric matrix through its eigendecomposition.
/// Returns the result and its nuclear norm.
fn soft_threshold_symmetric(a: DMatrix<f64>, beta: f64, iteration: usize) -> Result<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 1000 * n.max(1)).ok_or(Error::SvdFailure { iteration })?;
    let shrunk = eig.eigenvalues.map(|l| l.signum() * (l.abs() - beta).max(0.0));
    let nuclear = shrunk.iter().map(|v| v.abs()).sum();
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&shrunk) * q.transpose();
    symmetrize(&mut out);
    Ok((out, nuclear))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetrize, zero the diagonal, restore known entries and clip negatives.
fn finish(mut a: DMatrix<f64>, pm: &MaskedMatrix) -> Result<DistanceMatrix> {
    symmetrize(&mut a);
    let n = pm.n();
    for i in 0..n {
        a[(i, i)] = 0.0;
        for j in 0..n {
            if let Some(v) = pm.known(i, j) {
                a[(i, j)] = v;
            } else if a[(i, j)] < 0.0 {
                a[(i, j)] = 0.0;
            }
        }
    }
    DistanceMatrix::new(a, pm.is_squared())
}

fn default_beta(pm: &MaskedMatrix, cfg: &CompletionConfig) -> f64 {
    cfg.beta.unwrap_or_else(|| {
        let mean = pm.mean_known().unwrap_or(0.0).abs();
        if mean > 0.0 {
            cfg.beta_scale * mean
        } else {
            cfg.beta_scale
        }
    })
}

/// Accelerated proximal gradient on `½‖B⊙(A − Ã)‖²_F + β‖A‖_*`.
///
/// The diagonal is treated as known zeros.
pub fn fista_complete(pm: &MaskedMatrix, cfg: &CompletionConfig) -> Result<CompletionResult> {
    cfg.validate()?;
    require_known(pm)?;
    let n = pm.n();
    let beta0 = default_beta(pm, cfg);
    let floor = cfg.fista_continuation.map(|c| beta0 * c);
    let known = DMatrix::from_fn(n, n, |i, j| i == j || pm.mask().is_known(i, j));
    let target = pm.values().matrix().clone();

    let mut a = target.clone();
    let mut a_old = a.clone();
    let mut t = 1.0f64;
    let mut beta = beta0;
    let mut prev_loss: Option<f64> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    for k in 0..cfg.fista_max_iter {
        iterations = k + 1;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / t_next;
        let y = DMatrix::from_fn(n, n, |i, j| {
            if known[(i, j)] {
                target[(i, j)]
            } else {
                a[(i, j)] + w * (a[(i, j)] - a_old[(i, j)])
            }
        });
        let (next, nuclear) = soft_threshold_symmetric(y, beta, k)?;
        a_old = std::mem::replace(&mut a, next);
        t = t_next;

        let mut fit = 0.0;
        for j in 0..n {
            for i in 0..n {
                if known[(i, j)] {
                    let r = a[(i, j)] - target[(i, j)];
                    fit += r * r;
                }
            }
        }
        let loss = 0.5 * fit + beta * nuclear;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: k,
                context: "FISTA objective".into(),
            });
        }
        history.push(loss);
        if let Some(prev) = prev_loss {
            let change = if prev > 0.0 { (loss - prev).abs() / prev } else { 0.0 };
            if change < cfg.fista_tol {
                match floor {
                    Some(f) if beta * 0.5 >= f => {
                        beta *= 0.5;
                        prev_loss = None;
                        t = 1.0;
                        a_old = a.clone();
                        continue;
                    }
                    _ => break,
                }
            }
        }
        prev_loss = Some(loss);
    }
    let mut out = CompletionResult::new(finish(a, pm)?, Method::Fista);
    out.iterations = iterations;
    out.final_loss = history.last().copied().unwrap_or(0.0);
    out.loss_history = history;
    Ok(out)
}

/// `L(x) = Σ_{known i<j} (‖x_i − x_j‖² − ã_ij)²` and its gradient
/// `∂L/∂x_i = Σ_j 4(‖x_i − x_j‖² − ã_ij)(x_i − x_j)`.
///
/// `coords` is row-major `n × dim`.
pub fn trajectory_loss(pm: &MaskedMatrix, coords: &[f64], dim: usize) -> Result<(f64, Vec<f64>)> {
    let n = pm.n();
    if coords.len() != n * dim {
        return Err(Error::shape(n * dim, coords.len()));
    }
    let mut grad = vec![0.0; n * dim];
    let loss = accumulate_loss(pm, coords, dim, 1.0, &mut grad);
    Ok((loss, grad))
}

fn accumulate_loss(pm: &MaskedMatrix, x: &[f64], dim: usize, inv_scale: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (i, j) in pm.mask().known_pairs() {
        let target = pm.values().get(i, j) * inv_scale;
        let (xi, xj) = (&x[i * dim..(i + 1) * dim], &x[j * dim..(j + 1) * dim]);
        let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
        let r = d2 - target;
        loss += r * r;
        for c in 0..dim {
            let g = 4.0 * r * (xi[c] - xj[c]);
            grad[i * dim + c] += g;
            grad[j * dim + c] -= g;
        }
    }
    loss
}

/// Adam on point coordinates, warm-started from the realized
/// nearest-neighbor fill. Restart `k > 0` perturbs the warm start with noise
/// from stream `k` of `seed`; the lowest final loss is kept.
pub fn opt_complete(pm: &MaskedMatrix, cfg: &CompletionConfig, seed: u64) -> Result<CompletionResult> {
    cfg.validate()?;
    require_known(pm)?;
    if !pm.is_squared() {
        return Err(Error::invalid("trajectory optimization expects squared distances"));
    }
    let dim = cfg.opt_dim;
    let scale = match pm.mean_known() {
        Some(m) if m > 0.0 => m,
        _ => 1.0,
    };
    let inv_scale = 1.0 / scale;

    let nn = nn_complete_with(pm, cfg.nn_metric)?;
    let warm = realize(&nn.completed, dim, SCHOENBERG_TOL, RealizeMode::BestEffort)?;
    let root = scale.sqrt();
    let start: Vec<f64> = warm.trajectory.coords().iter().map(|v| v / root).collect();
    let spread = (start.iter().map(|v| v * v).sum::<f64>() / start.len().max(1) as f64).sqrt();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..cfg.opt_restarts {
        let mut x = start.clone();
        if restart > 0 {
            let mut r = rng::stream(seed, restart as u64);
            for v in &mut x {
                *v += 0.3 * spread.max(1e-3) * rng::normal(&mut r);
            }
        }
        let loss = adam(pm, &mut x, dim, inv_scale, cfg)?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, x));
        }
    }
    let (loss, x) = best.expect("at least one restart");
    let coords: Vec<f64> = x.iter().map(|v| v * root).collect();
    let completed = edm_from_trajectory(&Trajectory::new(dim, coords)?);
    let mut out = CompletionResult::new(completed, Method::Opt);
    out.iterations = cfg.opt_steps * cfg.opt_restarts;
    out.final_loss = loss * scale * scale;
    Ok(out)
}

/// Runs Adam in place and leaves `x` at the best iterate seen.
fn adam(pm: &MaskedMatrix, x: &mut [f64], dim: usize, inv_scale: f64, cfg: &CompletionConfig) -> Result<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let len = x.len();
    let exact = 1e-24 * pm.mask().known_count() as f64;
    let mut m = vec![0.0; len];
    let mut v = vec![0.0; len];
    let mut grad = vec![0.0; len];
    let mut best_x = x.to_vec();
    let mut best = f64::INFINITY;
    let (mut p1, mut p2) = (1.0f64, 1.0f64);
    for step in 0..=cfg.opt_steps {
        let loss = accumulate_loss(pm, x, dim, inv_scale, &mut grad);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: "trajectory loss".into(),
            });
        }
        if loss < best {
            best = loss;
            best_x.copy_from_slice(x);
        }
        if step == cfg.opt_steps || loss <= exact {
            break;
        }
        let progress = step as f64 / cfg.opt_steps as f64;
        let lr = cfg.opt_lr
            * (cfg.opt_lr_floor + (1.0 - cfg.opt_lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        p1 *= b1;
        p2 *= b2;
        for k in 0..len {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mh = m[k] / (1.0 - p1);
            let vh = v[k] / (1.0 - p2);
            x[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    x.copy_from_slice(&best_x);
    Ok(best)
}

/// Outcome of [`uniqueness_oracle`].
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub restarts: usize,
    /// Restarts whose loss fell below the exactness threshold.
    pub converged: usize,
    /// Largest normalized difference between any two converged completions.
    pub max_disagreement: f64,
}

impl UniquenessReport {
    /// `None` when no restart converged.
    pub fn unique(&self, tol: f64) -> Option<bool> {
        (self.converged > 0).then_some(self.max_disagreement <= tol)
    }
}

/// Multi-start coordinate optimization from independent random starts
/// (restart `k` uses stream `k` of `seed`). A restart counts as converged when
/// its normalized loss is at most `1e-16` per known pair.
pub fn uniqueness_oracle(
    pm: &MaskedMatrix,
    cfg: &CompletionConfig,
    restarts: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    cfg.validate()?;
    require_known(pm)?;
    let (n, dim) = (pm.n(), cfg.opt_dim);
    let scale = pm.mean_known().filter(|&m| m > 0.0).unwrap_or(1.0);
    let spread = 1.0 / (2.0 * dim as f64).sqrt();
    let threshold = 1e-16 * pm.mask().known_count() as f64;
    let runs: Vec<Result<Option<DistanceMatrix>>> =
        (0..restarts as u64)
            .into_par_iter()
            .map(|k| {
                let mut r = rng::stream(seed, k);
                let mut x: Vec<f64> = (0..n * dim).map(|_| spread * rng::normal(&mut r)).collect();
                adam(pm, &mut x, dim, 1.0 / scale, cfg)?;
                let loss = levenberg_marquardt(pm, &mut x, dim, 1.0 / scale, 100);
                Ok((loss <= threshold)
                    .then(|| edm_from_trajectory(&Trajectory::new(dim, x).expect("n x dim coordinates"))))
            })
            .collect();
    let mut done = Vec::new();
    for run in runs {
        if let Some(m) = run? {
            done.push(m);
        }
    }
    let mut worst = 0.0f64;
    for a in 0..done.len() {
        for b in a + 1..done.len() {
            worst = worst.max((done[a].matrix() - done[b].matrix()).amax());
        }
    }
    Ok(UniquenessReport {
        restarts,
        converged: done.len(),
        max_disagreement: worst,
    })
}

/// Damped Gauss-Newton refinement of the pair residuals; keeps `x` only
/// when the loss decreases. Returns the final loss.
fn levenberg_marquardt(pm: &MaskedMatrix, x: &mut [f64], dim: usize, inv_scale: f64, iters: usize) -> f64 {
    let pairs: Vec<(usize, usize)> = pm.mask().known_pairs().collect();
    let len = x.len();
    let mut grad = vec![0.0; len];
    let mut loss = accumulate_loss(pm, x, dim, inv_scale, &mut grad);
    let mut lambda = 1e-3;
    for _ in 0..iters {
        if loss <= 1e-30 {
            break;
        }
        let mut jac = DMatrix::zeros(pairs.len(), len);
        let mut res = nalgebra::DVector::zeros(pairs.len());
        for (row, &(i, j)) in pairs.iter().enumerate() {
            let mut d2 = 0.0;
            for c in 0..dim {
                let d = x[i * dim + c] - x[j * dim + c];
                d2 += d * d;
                jac[(row, i * dim + c)] = 2.0 * d;
                jac[(row, j * dim + c)] = -2.0 * d;
            }
            res[row] = d2 - pm.values().get(i, j) * inv_scale;
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for k in 0..len {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(v, s)| v - s).collect();
            let t = accumulate_loss(pm, &trial, dim, inv_scale, &mut grad);
            if t < loss {
                x.copy_from_slice(&trial);
                loss = t;
                lambda = (lambda * 0.1).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    loss
}

/// Fill each unknown entry with the closest known entry in index space
/// (Manhattan distance on (row, col)).
pub fn nn_complete(pm: &MaskedMatrix) -> Result<CompletionResult> {
    nn_complete_with(pm, NnMetric::Manhattan)
}

/// Ties go to the smaller row offset, then the smaller row, then the smaller column.
pub fn nn_complete_with(pm: &MaskedMatrix, metric: NnMetric) -> Result<CompletionResult> {
    require_known(pm)?;
    let n = pm.n();
    let known: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| pm.mask().is_known(i, j))
        .collect();
    let mut a = pm.values().matrix().clone();
    for (i, j) in pm.mask().unknown_pairs() {
        let (bi, bj) = known
            .iter()
            .copied()
            .min_by_key(|&(ki, kj)| {
                let di = i.abs_diff(ki);
                (metric.eval(di, j.abs_diff(kj)), di, ki, kj)
            })
            .expect("known entries exist");
        let v = pm.values().get(bi, bj);
        a[(i, j)] = v;
        a[(j, i)] = v;
    }
    Ok(CompletionResult::new(
        DistanceMatrix::new(a, pm.is_squared())?,
        Method::Nn,
    ))
}

/// Discrepancies `ε_i = ‖B⊙(A_i − Ã)‖²_F` over the database.
pub fn db_search_scores<I>(pm: &MaskedMatrix, database: I) -> Result<Vec<f64>>
where
    I: IntoIterator,
    I::Item: Borrow<DistanceMatrix>,
{
    let pairs: Vec<(usize, usize)> = pm.mask().known_pairs().collect();
    database
        .into_iter()
        .map(|entry| {
            let entry = entry.borrow();
            if entry.n() != pm.n() {
                return Err(Error::shape(pm.n(), entry.n()));
            }
            // both triangles of the Frobenius norm
            Ok(2.0
                * pairs
                    .iter()
                    .map(|&(i, j)| {
                        let r = entry.get(i, j) - pm.values().get(i, j);
                        r * r
                    })
                    .sum::<f64>())
        })
        .collect()
}

/// Copy unknown entries from the database entry with the smallest
/// discrepancy on known entries (lowest index on ties).
pub fn db_search_complete<I>(pm: &MaskedMatrix, database: I) -> Result<CompletionResult>
where
    I: IntoIterator,
    I::Item: Borrow<DistanceMatrix>,
{
    let pairs: Vec<(usize, usize)> = pm.mask().known_pairs().collect();
    let mut best: Option<(usize, f64, DistanceMatrix)> = None;
    for (idx, entry) in database.into_iter().enumerate() {
        let entry = entry.borrow();
        if entry.n() != pm.n() {
            return Err(Error::shape(pm.n(), entry.n()));
        }
        let eps = 2.0
            * pairs
                .iter()
                .map(|&(i, j)| {
                    let r = entry.get(i, j) - pm.values().get(i, j);
                    r * r
                })
                .sum::<f64>();
        if best.as_ref().is_none_or(|(_, b, _)| eps < *b) {
            best = Some((idx, eps, entry.clone()));
        }
    }
    let (idx, eps, entry) = best.ok_or_else(|| Error::invalid("database is empty"))?;
    let n = pm.n();
    let a = DMatrix::from_fn(n, n, |i, j| pm.known(i, j).unwrap_or_else(|| entry.get(i, j)));
    let mut out = CompletionResult::new(DistanceMatrix::new(a, pm.is_squared())?, Method::DbSearch);
    out.final_loss = eps;
    out.matched_index = Some(idx);
    Ok(out)
}

/// Fill unknown entries of `cells[target]` with the mean of that entry over
/// all cells where it is known. Entries never observed fall back to
/// [`nn_complete`] and are counted in `fallback_entries`.
pub fn ensemble_mean_complete(cells: &[MaskedMatrix], target: usize) -> Result<CompletionResult> {
    let tgt = cells
        .get(target)
        .ok_or_else(|| Error::invalid(format!("target {target} out of range for {} cells", cells.len())))?;
    let (sum, count) = known_sums(cells, tgt.n())?;
    fill_from_sums(tgt, &sum, &count)
}

/// [`ensemble_mean_complete`] for every cell, aggregating the ensemble once.
pub fn ensemble_mean_complete_all(cells: &[MaskedMatrix]) -> Result<Vec<CompletionResult>> {
    let Some(first) = cells.first() else {
        return Ok(Vec::new());
    };
    let (sum, count) = known_sums(cells, first.n())?;
    cells.par_iter().map(|c| fill_from_sums(c, &sum, &count)).collect()
}

fn known_sums(cells: &[MaskedMatrix], n: usize) -> Result<(DMatrix<f64>, DMatrix<usize>)> {
    if let Some(bad) = cells.iter().find(|c| c.n() != n) {
        return Err(Error::shape(n, bad.n()));
    }
    let mut sum = DMatrix::<f64>::zeros(n, n);
    let mut count = DMatrix::<usize>::zeros(n, n);
    for c in cells {
        for (i, j) in c.mask().known_pairs() {
            sum[(i, j)] += c.values().get(i, j);
            count[(i, j)] += 1;
        }
    }
    Ok((sum, count))
}

fn fill_from_sums(tgt: &MaskedMatrix, sum: &DMatrix<f64>, count: &DMatrix<usize>) -> Result<CompletionResult> {
    let mut a = tgt.values().matrix().clone();
    let mut missing = Vec::new();
    for (i, j) in tgt.mask().unknown_pairs() {
        if count[(i, j)] > 0 {
            let v = sum[(i, j)] / count[(i, j)] as f64;
            a[(i, j)] = v;
            a[(j, i)] = v;
        } else {
            missing.push((i, j));
        }
    }
    if !missing.is_empty() {
        let nn = nn_complete(tgt)?;
        for &(i, j) in &missing {
            let v = nn.completed.get(i, j);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut out = CompletionResult::new(DistanceMatrix::new(a, tgt.is_squared())?, Method::EnsembleMean);
    out.fallback_entries = missing.len();
    Ok(out)
}

/// Dispatch on `cfg.method` for the single-instance methods.
pub fn complete(pm: &MaskedMatrix, cfg: &CompletionConfig, seed: u64) -> Result<CompletionResult> {
    match cfg.method {
        Method::Fista => fista_complete(pm, cfg),
        Method::Opt => opt_complete(pm, cfg, seed),
        Method::Nn => nn_complete_with(pm, cfg.nn_metric),
        Method::DbSearch | Method::EnsembleMean => Err(Error::invalid(format!(
            "{} needs a reference set; call it directly",
            cfg.method.name()
        ))),
    }
}

/// Complete instances in parallel; instance `k` uses seed stream `k`.
pub fn complete_batch(pms: &[MaskedMatrix], cfg: &CompletionConfig, seed: u64) -> Vec<Result<CompletionResult>> {
    pms.par_iter()
        .enumerate()
        .map(|(k, pm)| complete(pm, cfg, seed.wrapping_add(k as u64)))
        .collect()
}
