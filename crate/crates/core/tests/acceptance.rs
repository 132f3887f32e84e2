//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero when any criterion fails.
//!
//! `cargo test -p edmkit --test acceptance -- 3 7` runs a subset.

// `!(e <= tol)` also counts NaN errors as failures
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::process::ExitCode;
use std::time::Instant;

use edmkit::complete::{
    db_search_complete, fista_complete, opt_complete, trajectory_loss, uniqueness_oracle, CompletionConfig, Method,
};
use edmkit::diffusion::{
    analytic_epsilon, ddpm_inpaint, ddpm_sample, default_schedule, inpaint, inpaint_batch, repaint_inpaint,
    GaussianEnsembleSpec, InpaintMethod, Observation, SamplerConfig,
};
use edmkit::edm::{edm_from_trajectory, random_mask_indexed, rank_fraction, DistanceMatrix, MaskedMatrix, RankNorm};
use edmkit::fbm::{generate_fbm, FbmParams};
use edmkit::metrics::{
    fid_scaling_fit, gaussian_collapse, rmse_masked, rmse_normalized, scaling_exponent, theoretical_m_star,
};
use edmkit::rigidity::{is_rigid, rigid_fraction, DEFAULT_MIN_LINKS};
use edmkit::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn ensemble(h: f64, n: usize, count: usize, seed: u64) -> Vec<DistanceMatrix> {
    let p = FbmParams::new(h, n).unwrap();
    generate_fbm(&p, count, seed)
        .unwrap()
        .par_iter()
        .map(edm_from_trajectory)
        .collect()
}

fn c1_fbm_ground_truth() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, h) in [1.0 / 3.0, 0.5, 2.0 / 3.0].into_iter().enumerate() {
        let e = ensemble(h, 64, 10_000, 100 + k as u64);
        let est = scaling_exponent(&e).unwrap();
        let collapse = gaussian_collapse(&e, &[4, 16, 48], 3).unwrap();
        let ok = (est.h_hat - h).abs() <= 0.02 && collapse.iter().all(|t| t.passed);
        pass &= ok;
        let ks: Vec<String> = collapse
            .iter()
            .map(|t| format!("s={} p={:.3}", t.s, t.p_value))
            .collect();
        parts.push(format!("H={h:.3}: h_hat={:.4} [{}]", est.h_hat, ks.join(", ")));
    }
    verdict(pass, parts.join("; "))
}

fn c2_rank_law() -> Verdict {
    let mut worst = f64::INFINITY;
    for (k, h) in [1.0 / 3.0, 0.5, 2.0 / 3.0].into_iter().enumerate() {
        let e = ensemble(h, 64, 1000, 200 + k as u64);
        let min = e
            .par_iter()
            .map(|m| rank_fraction(m, 5, RankNorm::SpectralL2).unwrap())
            .reduce(|| f64::INFINITY, f64::min);
        worst = worst.min(min);
    }
    verdict(
        worst >= 0.999,
        format!("min rank_fraction(r=5) over 3000 EDMs = {worst:.6}"),
    )
}

fn c3_rigidity_soundness() -> Verdict {
    // FISTA recovery of every rigid mask, missing ratios spread over 0.1..0.5
    let truth = ensemble(0.5, 16, 200, 300);
    let cfg = CompletionConfig::default();
    let outcomes: Vec<Option<f64>> = truth
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let mu = 0.1 + 0.4 * k as f64 / 199.0;
            let mask = random_mask_indexed(16, mu, 301, k as u64).unwrap();
            if !is_rigid(&mask, DEFAULT_MIN_LINKS).rigid {
                return None;
            }
            let pm = MaskedMatrix::new(t, mask.clone()).unwrap();
            let a = fista_complete(&pm, &cfg).unwrap().completed;
            Some(if mask.unknown_pairs().next().is_some() {
                rmse_normalized(&a, t, &mask).unwrap()
            } else {
                0.0
            })
        })
        .collect();
    let errs: Vec<f64> = outcomes.into_iter().flatten().collect();
    let missed = errs.iter().filter(|&&e| !(e < 1e-3)).count();
    let worst = errs.iter().copied().fold(0.0, f64::max);

    // small graphs against the multi-start oracle
    let opt = CompletionConfig::for_method(Method::Opt);
    let rows: Vec<(bool, Option<bool>)> = (0..100u64)
        .into_par_iter()
        .map(|k| {
            let n = 5 + (k % 3) as usize;
            let mu = 0.05 + 0.5 * (k / 3) as f64 / 33.0;
            let t = &ensemble(0.5, n, 1, 400 + k)[0];
            let mask = random_mask_indexed(n, mu, 401, k).unwrap();
            let rigid = is_rigid(&mask, DEFAULT_MIN_LINKS).rigid;
            if mask.known_pairs().next().is_none() {
                return (rigid, Some(false));
            }
            let pm = MaskedMatrix::new(t, mask).unwrap();
            let tol = 1e-6 * pm.mean_known().unwrap().max(f64::MIN_POSITIVE);
            let rep = uniqueness_oracle(&pm, &opt, 50, 402 + k).unwrap();
            (rigid, rep.unique(tol))
        })
        .collect();
    let contradictions = rows.iter().filter(|(r, u)| *r && *u != Some(true)).count();
    let rigid = rows.iter().filter(|(r, _)| *r).count();
    let conservative = rows.iter().filter(|(r, u)| !*r && *u == Some(true)).count();
    verdict(
        missed == 0 && contradictions == 0,
        format!(
            "n=16: {missed}/{} rigid masks not recovered below 1e-3 (worst {worst:.2e}); \
             n<=7: {contradictions} contradictions, {rigid} rigid, {conservative} unique but not certified",
            errs.len()
        ),
    )
}

fn c4_rigidity_transition() -> Verdict {
    let lo = rigid_fraction(64, 0.5, 200, 500).unwrap();
    let hi = rigid_fraction(64, 0.85, 200, 501).unwrap();
    verdict(
        lo > 0.95 && hi < 0.05,
        format!("rigid fraction {lo:.3} at mu=0.5, {hi:.3} at mu=0.85"),
    )
}

const RUNS: usize = 10_000;

fn gaussian_spec(seed: u64) -> GaussianEnsembleSpec {
    let d = 16;
    let mut r = rng::stream(seed, 0);
    let mut normal = || -> f64 { r.sample(StandardNormal) };
    let w = DMatrix::from_fn(d, d, |_, _| normal());
    let cov = &w * w.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05;
    let mean = (0..d).map(|_| normal()).collect();
    GaussianEnsembleSpec::new(mean, cov).unwrap()
}

fn sampler() -> SamplerConfig {
    SamplerConfig::default()
}

/// Largest |z| of the sample mean and covariance against the exact moments.
fn moment_z(samples: &[Vec<f64>], mean: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, f64) {
    let m = samples.len() as f64;
    let d = mean.len();
    let mut mu = DVector::zeros(d);
    for x in samples {
        mu += DVector::from_column_slice(x);
    }
    mu /= m;
    let mut c = DMatrix::zeros(d, d);
    for x in samples {
        let v = DVector::from_column_slice(x) - &mu;
        c += &v * v.transpose();
    }
    c /= m - 1.0;
    let mut zm = 0.0f64;
    let mut zc = 0.0f64;
    for i in 0..d {
        zm = zm.max((mu[i] - mean[i]).abs() / (cov[(i, i)] / m).sqrt());
        for j in 0..=i {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / m).sqrt();
            zc = zc.max((c[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    (zm, zc)
}

fn c5_sampler_oracle() -> Verdict {
    let schedule = default_schedule();
    let cfg = sampler();
    let chain = cfg.chain(&schedule).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 1..=3u64 {
        let spec = gaussian_spec(seed);
        let model = analytic_epsilon(&spec, &schedule);
        let free = ddpm_sample(&model, &chain, &cfg, RUNS, seed).unwrap();
        let (zm, zc) = moment_z(&free, spec.mean(), spec.cov());
        pass &= zm <= 3.0 && zc <= 3.0;
        // the same statistic on exact draws, for scale
        let (em, ec) = moment_z(&spec.sample(RUNS, 650 + seed), spec.mean(), spec.cov());
        let mut line = format!("seed {seed}: ddpm_sample |z| mean {zm:.2} cov {zc:.2} (exact draws {em:.2}/{ec:.2})");

        let x = &spec.sample(1, 600 + seed)[0];
        let mut r = rng::stream(seed, 1);
        let known: Vec<bool> = (0..16).map(|_| r.random_bool(0.5)).collect();
        let y = Observation::new(4, x.clone(), known.clone()).unwrap();
        let (cm, cc) = spec.conditional(&known, x).unwrap();
        let unknown: Vec<usize> = (0..16).filter(|&i| !known[i]).collect();
        let ys = vec![y; RUNS];
        for method in InpaintMethod::ALL {
            let out = inpaint_batch(method, &model, &chain, &ys, &cfg, seed).unwrap();
            let (mut z, mut bias) = (0.0f64, 0.0f64);
            for (a, &i) in unknown.iter().enumerate() {
                let mean = out.iter().map(|o| o[i]).sum::<f64>() / RUNS as f64;
                let sd = cc[(a, a)].sqrt();
                z = z.max((mean - cm[a]).abs() / (sd / (RUNS as f64).sqrt()));
                bias = bias.max((mean - cm[a]).abs() / sd);
            }
            pass &= z <= 3.0;
            line += &format!(", {} |z| {z:.1} ({bias:.3} SD)", method.name());
        }
        parts.push(line);
    }
    verdict(pass, parts.join("; "))
}

fn c6_known_entries() -> Verdict {
    let schedule = default_schedule();
    let cfg = SamplerConfig { steps: 50, ..sampler() };
    let chain = cfg.chain(&schedule).unwrap();
    let spec = gaussian_spec(7);
    let model = analytic_epsilon(&spec, &schedule);
    let mut r = rng::stream(7, 1);
    let (mut changed, mut diverged) = (0usize, 0usize);
    for k in 0..20u64 {
        let x = &spec.sample(1, 700 + k)[0];
        let known: Vec<bool> = (0..16).map(|_| r.random_bool(0.5)).collect();
        let y = Observation::new(4, x.clone(), known.clone()).unwrap();
        for method in InpaintMethod::ALL {
            let out = inpaint(method, &model, &chain, &y, &cfg, 8, k).unwrap();
            changed += (0..16).filter(|&i| known[i] && out[i] != x[i]).count();
        }
        let one = SamplerConfig {
            repaint_resamples: 1,
            ..cfg.clone()
        };
        let a = repaint_inpaint(&model, &chain, &y, &one, 9 + k).unwrap();
        let b = ddpm_inpaint(&model, &chain, &y, &one, 9 + k).unwrap();
        diverged += usize::from(a != b);
    }
    verdict(
        changed == 0 && diverged == 0,
        format!("{changed} known entries altered over 80 runs; {diverged}/20 RePaint(1) trajectories differ from DDPM"),
    )
}

fn c7_fista_opt() -> Verdict {
    let truth = ensemble(0.5, 16, 120, 800);
    let mut instances = Vec::new();
    for (k, t) in truth.iter().enumerate() {
        let mask = random_mask_indexed(16, 0.2, 801, k as u64).unwrap();
        if is_rigid(&mask, DEFAULT_MIN_LINKS).rigid && mask.unknown_pairs().next().is_some() {
            instances.push((t, mask));
        }
        if instances.len() == 50 {
            break;
        }
    }
    let fista_cfg = CompletionConfig::default();
    let opt_cfg = CompletionConfig {
        opt_restarts: 20,
        ..CompletionConfig::for_method(Method::Opt)
    };
    let errs: Vec<(f64, f64, f64)> = instances
        .par_iter()
        .enumerate()
        .map(|(k, (t, mask))| {
            let pm = MaskedMatrix::new(t, mask.clone()).unwrap();
            let f = fista_complete(&pm, &fista_cfg).unwrap().completed;
            let o = opt_complete(&pm, &opt_cfg, 802 + k as u64).unwrap().completed;
            (
                rmse_normalized(&f, &o, mask).unwrap(),
                rmse_normalized(&f, t, mask).unwrap(),
                rmse_normalized(&o, t, mask).unwrap(),
            )
        })
        .collect();
    let disagree = errs.iter().filter(|e| !(e.0 <= 1e-2)).count();
    let fista_off = errs.iter().filter(|e| !(e.1 <= 1e-2)).count();
    let opt_off = errs.iter().filter(|e| !(e.2 <= 1e-2)).count();

    // analytic gradient against central differences
    let mut worst = 0.0f64;
    for k in 0..10u64 {
        let t = &truth[k as usize];
        let pm = MaskedMatrix::new(t, random_mask_indexed(16, 0.3, 803, k).unwrap()).unwrap();
        let mut r = rng::stream(804, k);
        let x: Vec<f64> = (0..48).map(|_| r.sample(StandardNormal)).collect();
        let (_, g) = trajectory_loss(&pm, &x, 3).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                (trajectory_loss(&pm, &xp, 3).unwrap().0 - trajectory_loss(&pm, &xm, 3).unwrap().0) / (2.0 * h)
            })
            .collect();
        let diff: f64 = fd.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    verdict(
        instances.len() == 50 && disagree == 0 && fista_off == 0 && opt_off == 0 && worst <= 1e-5,
        format!(
            "{} rigid instances: FISTA/OPT disagree on {disagree}, FISTA off truth on {fista_off}, \
             OPT off truth on {opt_off} (tol 1e-2 normalized); gradient rel. error {worst:.1e}",
            instances.len()
        ),
    )
}

fn c8_database_search() -> Verdict {
    let db = ensemble(0.5, 16, 100, 900);
    let bad: Vec<u64> = (0..100u64)
        .into_par_iter()
        .filter(|&k| {
            let t = &db[k as usize];
            let mask = random_mask_indexed(16, 0.5, 901, k).unwrap();
            let pm = MaskedMatrix::new(t, mask.clone()).unwrap();
            let res = db_search_complete(&pm, &db).unwrap();
            let err = if mask.unknown_pairs().next().is_some() {
                rmse_masked(&res.completed, t, &mask).unwrap()
            } else {
                0.0
            };
            err != 0.0 || res.completed != *t
        })
        .collect();
    verdict(
        bad.is_empty(),
        format!("{} of 100 member queries reconstructed with nonzero error", bad.len()),
    )
}

fn c9_fid_fit() -> Verdict {
    let (a, gamma) = (1.41, 0.026);
    let mut pts = Vec::new();
    for &mu in &[0.1, 0.25, 0.5, 0.75, 0.9] {
        for &m in &[1e3, 5e3, 2e4, 2e5] {
            pts.push((m, mu, 2.5 * f64::powf(mu, a) * f64::powf(m, -gamma)));
        }
    }
    let fit = fid_scaling_fit(&pts, None).unwrap();
    let m_star = theoretical_m_star(65).unwrap();
    let ok = (fit.a - a).abs() <= 1e-6 && (fit.gamma - gamma).abs() <= 1e-6 && (m_star - 78.88).abs() <= 0.05;
    verdict(
        ok,
        format!("a={:.9} gamma={:.9}; log10 m*(65)={m_star:.3}", fit.a, fit.gamma),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "fBm ground truth", c1_fbm_ground_truth),
        (2, "EDM rank law", c2_rank_law),
        (3, "rigidity soundness", c3_rigidity_soundness),
        (4, "rigidity transition", c4_rigidity_transition),
        (5, "sampler-oracle equivalence", c5_sampler_oracle),
        (6, "known-entry preservation", c6_known_entries),
        (7, "FISTA/OPT agreement", c7_fista_opt),
        (8, "database-search exactness", c8_database_search),
        (9, "FID scaling fit", c9_fid_fit),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} {name}: {status} ({:.1} s) {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
