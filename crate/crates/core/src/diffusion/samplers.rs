//! Reverse-process samplers.
//!
//! Chain `index` under `seed` draws from three streams: the initial image and
//! reverse-step noise, the noising of the observation, and forward re-noising
//! (RePaint resampling, DDNM jumps). Keeping them apart makes DDPM inpainting
//! with nothing known reproduce [`ddpm_sample`] exactly, and RePaint with one
//! resample reproduce [`ddpm_inpaint`] exactly.

use std::collections::HashMap;

use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EpsilonPredictor, NoiseSchedule, Observation, PosteriorVariance, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng;

const REVERSE: u64 = 0;
const OBSERVED: u64 = 1;
const FORWARD: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InpaintMethod {
    Ddpm,
    Repaint,
    Ddrm,
    Ddnm,
}

impl InpaintMethod {
    pub const ALL: [InpaintMethod; 4] = [
        InpaintMethod::Ddpm,
        InpaintMethod::Repaint,
        InpaintMethod::Ddrm,
        InpaintMethod::Ddnm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InpaintMethod::Ddpm => "ddpm",
            InpaintMethod::Repaint => "repaint",
            InpaintMethod::Ddrm => "ddrm",
            InpaintMethod::Ddnm => "ddnm",
        }
    }
}

fn normals(r: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    rng::fill_normal(r, &mut v);
    v
}

fn predict(model: &dyn EpsilonPredictor, x: &[f64], t: usize) -> Result<Vec<f64>> {
    let eps = model.predict(x, t)?;
    if eps.len() != x.len() {
        return Err(Error::shape(x.len(), eps.len()));
    }
    Ok(eps)
}

fn ensure_finite(x: &[f64], t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: t,
            context: "sampler state".into(),
        })
    }
}

fn check_observation(model: &dyn EpsilonPredictor, y: &Observation) -> Result<()> {
    if model.size() != y.n() {
        return Err(Error::shape(
            format!("{0}x{0} observation", model.size()),
            format!("{0}x{0}", y.n()),
        ));
    }
    Ok(())
}

fn restore_known(x: &mut [f64], y: &Observation) {
    for (k, v) in x.iter_mut().enumerate() {
        if y.is_known(k) {
            *v = y.values()[k];
        }
    }
}

/// DDPM reverse chain with optional projection onto a noised observation and
/// RePaint resampling loops.
fn ddpm_chain(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: Option<&Observation>,
    resamples: usize,
    posterior: PosteriorVariance,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    let n = model.size();
    let d = n * n;
    let mut reverse = rng::item_stream(seed, index, REVERSE);
    let mut observed = rng::item_stream(seed, index, OBSERVED);
    let mut forward = rng::item_stream(seed, index, FORWARD);
    let mut x = normals(&mut reverse, d);
    for i in (0..s.len()).rev() {
        let last = i == 0;
        let (beta, ab) = (s.beta(i), s.alpha_bar(i));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_root_alpha = 1.0 / (1.0 - beta).sqrt();
        let sigma = s.sigma(i, posterior);
        let loops = if last { 1 } else { resamples };
        for r in 0..loops {
            let y_prev = y.map(|y| {
                if last {
                    y.values().to_vec()
                } else {
                    let abp = s.alpha_bar_prev(i);
                    let e = normals(&mut observed, d);
                    y.values()
                        .iter()
                        .zip(&e)
                        .map(|(v, e)| abp.sqrt() * v + (1.0 - abp).sqrt() * e)
                        .collect::<Vec<_>>()
                }
            });
            let eps = predict(model, &x, s.timesteps()[i])?;
            let mut next: Vec<f64> = x
                .iter()
                .zip(&eps)
                .map(|(x, e)| (x - coef * e) * inv_root_alpha)
                .collect();
            if !last {
                let z = normals(&mut reverse, d);
                for (v, z) in next.iter_mut().zip(&z) {
                    *v += sigma * z;
                }
            }
            if let (Some(y), Some(yp)) = (y, y_prev) {
                for k in 0..d {
                    if y.is_known(k) {
                        next[k] = yp[k];
                    }
                }
            }
            ensure_finite(&next, s.timesteps()[i])?;
            if r + 1 < loops {
                let z = normals(&mut forward, d);
                x = next
                    .iter()
                    .zip(&z)
                    .map(|(v, z)| (1.0 - beta).sqrt() * v + beta.sqrt() * z)
                    .collect();
            } else {
                x = next;
            }
        }
    }
    if let Some(y) = y {
        restore_known(&mut x, y);
    }
    Ok(x)
}

/// One unconditional sample, chain `index` of `seed`.
pub fn sample_indexed(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    ddpm_chain(model, s, None, 1, cfg.posterior, seed, index)
}

/// `count` unconditional samples over the chain `s`; sample `k` is chain `k`.
pub fn ddpm_sample(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|k| ddpm_chain(model, s, None, 1, cfg.posterior, seed, k))
        .collect()
}

fn ddrm_chain(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    let d = y.n() * y.n();
    let eta = cfg.ddrm_eta;
    let sigma_y = cfg.ddrm_sigma_y;
    let keep = (1.0 - eta * eta).sqrt();
    let mut reverse = rng::item_stream(seed, index, REVERSE);
    let mut x = normals(&mut reverse, d);
    for i in (0..s.len()).rev() {
        let (ab, abp) = (s.alpha_bar(i), s.alpha_bar_prev(i));
        let eps = predict(model, &x, s.timesteps()[i])?;
        let sigma_t = ((1.0 - ab) / ab).sqrt();
        let sigma_prev = ((1.0 - abp) / abp).sqrt();
        let z = if i > 0 { normals(&mut reverse, d) } else { vec![0.0; d] };
        let mut next = vec![0.0; d];
        for k in 0..d {
            let x0 = (x[k] - (1.0 - ab).sqrt() * eps[k]) / ab.sqrt();
            let xbar = x[k] / ab.sqrt();
            next[k] = if !y.is_known(k) {
                x0 + keep * sigma_prev * (xbar - x0) / sigma_t + eta * sigma_prev * z[k]
            } else if sigma_prev < sigma_y {
                x0 + keep * sigma_prev * (y.values()[k] - x0) / sigma_y + eta * sigma_prev * z[k]
            } else {
                y.values()[k] + (sigma_prev * sigma_prev - sigma_y * sigma_y).sqrt() * z[k]
            };
            next[k] *= abp.sqrt();
        }
        ensure_finite(&next, s.timesteps()[i])?;
        x = next;
    }
    if sigma_y == 0.0 {
        restore_known(&mut x, y);
    }
    Ok(x)
}

/// Levels visited by the time-travel schedule, from `steps` down to 0.
///
/// After arriving at levels 1, L+1, 2L+1, … (below `steps − L + 1`) the
/// chain jumps back up by `L` levels, `repeats − 1` times each.
pub fn time_travel_levels(steps: usize, travel_length: usize, repeats: usize) -> Vec<usize> {
    let mut jumps: HashMap<usize, usize> = HashMap::new();
    if travel_length > 0 && repeats > 1 {
        for j in (0..steps.saturating_sub(travel_length)).step_by(travel_length) {
            jumps.insert(j + 1, repeats - 1);
        }
    }
    let mut levels = vec![steps];
    let mut t = steps;
    while t >= 1 {
        t -= 1;
        levels.push(t);
        if let Some(left) = jumps.get_mut(&t) {
            if *left > 0 {
                *left -= 1;
                t += travel_length;
                levels.push(t);
            }
        }
    }
    levels
}

fn ddnm_chain(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    let d = y.n() * y.n();
    let mut reverse = rng::item_stream(seed, index, REVERSE);
    let mut forward = rng::item_stream(seed, index, FORWARD);
    let level_ab = |l: usize| if l == 0 { 1.0 } else { s.alpha_bar(l - 1) };
    let mut x = normals(&mut reverse, d);
    let levels = time_travel_levels(s.len(), cfg.ddnm_travel_length, cfg.ddnm_repeats);
    for w in levels.windows(2) {
        let (from, to) = (w[0], w[1]);
        if to < from {
            let i = from - 1;
            let (beta, ab, abp) = (s.beta(i), s.alpha_bar(i), s.alpha_bar_prev(i));
            let eps = predict(model, &x, s.timesteps()[i])?;
            let c0 = abp.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
            let sigma = s.sigma(i, cfg.posterior);
            let z = if i > 0 { normals(&mut reverse, d) } else { vec![0.0; d] };
            let mut next = vec![0.0; d];
            for k in 0..d {
                let x0 = if y.is_known(k) {
                    y.values()[k]
                } else {
                    (x[k] - (1.0 - ab).sqrt() * eps[k]) / ab.sqrt()
                };
                next[k] = c0 * x0 + ct * x[k] + sigma * z[k];
            }
            ensure_finite(&next, s.timesteps()[i])?;
            x = next;
        } else {
            let ratio = level_ab(to) / level_ab(from);
            let z = normals(&mut forward, d);
            for (v, z) in x.iter_mut().zip(&z) {
                *v = ratio.sqrt() * *v + (1.0 - ratio).sqrt() * z;
            }
        }
    }
    restore_known(&mut x, y);
    Ok(x)
}

/// Inpaint `y` with `method`, chain `index` of `seed`.
pub fn inpaint(
    method: InpaintMethod,
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_observation(model, y)?;
    match method {
        InpaintMethod::Ddpm => ddpm_chain(model, s, Some(y), 1, cfg.posterior, seed, index),
        InpaintMethod::Repaint => ddpm_chain(model, s, Some(y), cfg.repaint_resamples, cfg.posterior, seed, index),
        InpaintMethod::Ddrm => ddrm_chain(model, s, y, cfg, seed, index),
        InpaintMethod::Ddnm => ddnm_chain(model, s, y, cfg, seed, index),
    }
}

/// Inpaint each observation; observation `k` is chain `k`.
pub fn inpaint_batch(
    method: InpaintMethod,
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    ys: &[Observation],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    ys.par_iter()
        .enumerate()
        .map(|(k, y)| inpaint(method, model, s, y, cfg, seed, k as u64))
        .collect()
}

/// DDPM with a projection onto the noised observation after every step.
pub fn ddpm_inpaint(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    inpaint(InpaintMethod::Ddpm, model, s, y, cfg, seed, 0)
}

/// DDPM projection with `cfg.repaint_resamples` back-and-forth loops per step.
pub fn repaint_inpaint(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    inpaint(InpaintMethod::Repaint, model, s, y, cfg, seed, 0)
}

/// DDRM for a selection mask, in variance-exploding coordinates.
pub fn ddrm_inpaint(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    inpaint(InpaintMethod::Ddrm, model, s, y, cfg, seed, 0)
}

/// DDNM null-space projection with time travel.
pub fn ddnm_inpaint(
    model: &dyn EpsilonPredictor,
    s: &NoiseSchedule,
    y: &Observation,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    inpaint(InpaintMethod::Ddnm, model, s, y, cfg, seed, 0)
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::diffusion::{analytic_epsilon, default_schedule, GaussianEnsembleSpec};

    fn spec() -> GaussianEnsembleSpec {
        let d = 4;
        let mut r = rng::stream(1, 0);
        let w = DMatrix::from_fn(d, d, |_, _| rng::normal(&mut r));
        let cov = &w * w.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
        GaussianEnsembleSpec::new(vec![0.5, -0.2, 0.1, 0.3], cov).unwrap()
    }

    fn cfg(steps: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn travel_levels() {
        let plain = time_travel_levels(5, 1, 1);
        assert_eq!(plain, vec![5, 4, 3, 2, 1, 0]);
        let l = time_travel_levels(10, 3, 3);
        assert_eq!(l[0], 10);
        assert_eq!(*l.last().unwrap(), 0);
        // never jumps from the clean level
        assert!(l.windows(2).all(|w| w[0] != 0));
        let downs = l.windows(2).filter(|w| w[1] < w[0]).count();
        // jump levels 1, 4 and 7: two extra passes of three steps each
        assert_eq!(downs, 10 + 3 * 2 * 3);
        assert_eq!(time_travel_levels(3, 3, 3), vec![3, 2, 1, 0]);
    }

    #[test]
    fn all_known_returns_observation() {
        let s = default_schedule();
        let model = analytic_epsilon(&spec(), &s);
        let c = cfg(20);
        let chain = c.chain(&s).unwrap();
        let y = Observation::new(2, vec![1.0, -2.0, 0.5, 3.0], vec![true; 4]).unwrap();
        for m in InpaintMethod::ALL {
            let out = inpaint(m, &model, &chain, &y, &c, 3, 0).unwrap();
            assert_eq!(out, y.values(), "{}", m.name());
        }
    }

    #[test]
    fn ddpm_inpaint_without_known_entries_is_unconditional() {
        let s = default_schedule();
        let model = analytic_epsilon(&spec(), &s);
        let c = cfg(25);
        let chain = c.chain(&s).unwrap();
        let free = ddpm_sample(&model, &chain, &c, 3, 9).unwrap();
        for (k, f) in free.iter().enumerate() {
            let y = Observation::unknown(2);
            let out = inpaint(InpaintMethod::Ddpm, &model, &chain, &y, &c, 9, k as u64).unwrap();
            assert_eq!(&out, f);
        }
    }

    #[test]
    fn repaint_single_loop_is_ddpm_inpaint() {
        let s = default_schedule();
        let model = analytic_epsilon(&spec(), &s);
        let c = SamplerConfig {
            repaint_resamples: 1,
            ..cfg(25)
        };
        let chain = c.chain(&s).unwrap();
        let y = Observation::new(2, vec![1.0, 0.0, 0.0, 2.0], vec![true, false, false, true]).unwrap();
        let a = repaint_inpaint(&model, &chain, &y, &c, 4).unwrap();
        let b = ddpm_inpaint(&model, &chain, &y, &c, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samplers_are_reproducible_and_keep_known_entries() {
        let s = default_schedule();
        let model = analytic_epsilon(&spec(), &s);
        let c = cfg(30);
        let chain = c.chain(&s).unwrap();
        let y = Observation::new(2, vec![0.3, 0.0, -0.7, 0.0], vec![true, false, true, false]).unwrap();
        for m in InpaintMethod::ALL {
            let a = inpaint(m, &model, &chain, &y, &c, 5, 2).unwrap();
            let b = inpaint(m, &model, &chain, &y, &c, 5, 2).unwrap();
            assert_eq!(a, b);
            assert_eq!(a[0], 0.3);
            assert_eq!(a[2], -0.7);
        }
    }

    #[test]
    fn ddnm_without_travel_is_a_plain_chain() {
        let s = default_schedule();
        let model = analytic_epsilon(&spec(), &s);
        let c = SamplerConfig {
            ddnm_travel_length: 1,
            ddnm_repeats: 1,
            ..cfg(20)
        };
        let chain = c.chain(&s).unwrap();
        let y = Observation::new(2, vec![0.3, 0.0, -0.7, 0.0], vec![true, false, true, false]).unwrap();
        let a = ddnm_inpaint(&model, &chain, &y, &c, 1).unwrap();
        // a long travel length disables jumps as well
        let long = SamplerConfig {
            ddnm_travel_length: 50,
            ddnm_repeats: 3,
            ..c.clone()
        };
        let b = ddnm_inpaint(&model, &chain, &y, &long, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let s = default_schedule();
        let model = analytic_epsilon(&spec(), &s);
        let c = cfg(10);
        let chain = c.chain(&s).unwrap();
        let y = Observation::unknown(3);
        assert!(ddpm_inpaint(&model, &chain, &y, &c, 0).is_err());
    }
}
