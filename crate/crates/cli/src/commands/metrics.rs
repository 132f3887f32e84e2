use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use edmkit::edm::{rank_fraction, DistanceMatrix, RankNorm};
use edmkit::io::{write_atomic, PcaeFile};
use edmkit::metrics::{
    fid_scaling_fit, fit_pca, frechet_with_error, gaussian_collapse, rmse_masked, scaling_exponent,
    scaling_exponent_window, EnsembleEmbedding, FidReference, PcaEmbedding, Subsampling,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::common::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// Masked RMSE of `--input` against `--reference` on the unknown pairs of `--mask`.
    Rmse,
    /// Fréchet distance between `--input` and `--reference`.
    Fid,
    /// Scaling exponent of the mean distance curve.
    Scaling,
    /// KS test of rescaled distances against the Gaussian prediction.
    Collapse,
    /// Rank fraction of the top singular values.
    Rank,
    /// Fit of FID against database size and missing ratio.
    Fidfit,
}

impl MetricKind {
    fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Fid => "fid",
            MetricKind::Scaling => "scaling",
            MetricKind::Collapse => "collapse",
            MetricKind::Rank => "rank",
            MetricKind::Fidfit => "fidfit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Identity,
    #[default]
    Pca,
}

/// Ensemble and completion metrics.
#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long, value_enum)]
    metric: Option<MetricKind>,
    /// EDMD under evaluation.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Reference EDMD (ground truth or reference ensemble).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// MASK file for rmse.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingKind>,
    /// PCA components.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// PCAE file: loaded when it exists, otherwise fitted on the reference and saved.
    #[arg(long)]
    pca_file: Option<PathBuf>,
    /// Subsampling draws for the Fréchet error bar.
    #[arg(long)]
    draws: Option<usize>,
    /// Separations for the collapse test.
    #[arg(long, value_delimiter = ',')]
    s: Option<Vec<usize>>,
    /// Spatial dimension for the collapse test.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    /// CSV with columns m, mu, fid (fidfit).
    #[arg(long)]
    points: Option<PathBuf>,
    /// Reference FID and missing ratio for the m* estimate (fidfit).
    #[arg(long)]
    ref_fid: Option<f64>,
    #[arg(long)]
    ref_mu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Full JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub metric: Option<MetricKind>,
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub embedding: EmbeddingKind,
    pub pca_dim: usize,
    pub pca_file: Option<PathBuf>,
    pub draws: usize,
    pub fraction: f64,
    pub s: Vec<usize>,
    pub dim: usize,
    pub rank: usize,
    pub rank_norm: RankNorm,
    /// Fit window `[lo, hi]` for the scaling exponent.
    pub window: Option<(usize, usize)>,
    pub points: Option<PathBuf>,
    pub ref_fid: Option<f64>,
    pub ref_mu: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            metric: None,
            input: None,
            reference: None,
            mask: None,
            embedding: EmbeddingKind::Pca,
            pca_dim: 64,
            pca_file: None,
            draws: 100,
            fraction: 0.9,
            s: vec![4, 16, 48],
            dim: 3,
            rank: 5,
            rank_norm: RankNorm::SpectralL2,
            window: None,
            points: None,
            ref_fid: None,
            ref_mu: None,
            seed: 0,
            out: None,
        }
    }
}

struct Evaluation {
    value: Value,
    error: Value,
    details: Value,
}

pub fn run(args: MetricsArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: MetricsConfig = load_config(config, "metrics")?;
    overlay!(cfg, args; embedding, pca_dim, draws, s, dim, rank, seed);
    overlay_opt!(cfg, args; metric, input, reference, mask, pca_file, points, ref_fid, ref_mu, out);
    let metric = *required(&cfg.metric, "--metric")?;
    let mut digests = BTreeMap::new();
    let mut digest = |p: &Path| -> CliResult<()> {
        digests.insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    };
    let eval = match metric {
        MetricKind::Rmse => {
            let input = required(&cfg.input, "--input")?;
            let reference = required(&cfg.reference, "--reference")?;
            let mask = required(&cfg.mask, "--mask")?;
            for p in [input, reference, mask] {
                digest(p)?;
            }
            rmse(input, reference, mask)?
        }
        MetricKind::Rank => {
            let input = required(&cfg.input, "--input")?;
            digest(input)?;
            let (_, ms) = read_matrices(input)?;
            let r: Vec<f64> = ms
                .par_iter()
                .map(|m| rank_fraction(m, cfg.rank.min(m.n()), cfg.rank_norm))
                .collect::<edmkit::Result<_>>()?;
            let (mean, err) = mean_err(&r);
            Evaluation {
                value: finite(mean),
                error: finite(err),
                details: json!({ "count": r.len(), "min": r.iter().cloned().fold(f64::INFINITY, f64::min) }),
            }
        }
        MetricKind::Scaling => {
            let input = required(&cfg.input, "--input")?;
            digest(input)?;
            let (_, ms) = read_matrices(input)?;
            let est = match cfg.window {
                Some((lo, hi)) => scaling_exponent_window(&ms, lo, hi)?,
                None => scaling_exponent(&ms)?,
            };
            Evaluation {
                value: finite(est.h_hat),
                error: Value::Null,
                details: serde_json::to_value(&est)?,
            }
        }
        MetricKind::Collapse => {
            let input = required(&cfg.input, "--input")?;
            digest(input)?;
            let (batch, ms) = read_matrices(input)?;
            let s: Vec<usize> = cfg.s.iter().copied().filter(|&s| s >= 1 && s < batch.n).collect();
            if s.is_empty() {
                return Err(usage(format!("no separation in {:?} fits n={}", cfg.s, batch.n)));
            }
            let tests = gaussian_collapse(&ms, &s, cfg.dim)?;
            let passed = tests.iter().filter(|t| t.passed).count();
            Evaluation {
                value: (passed as f64 / tests.len() as f64).into(),
                error: Value::Null,
                details: json!({ "all_passed": passed == tests.len(), "tests": tests }),
            }
        }
        MetricKind::Fid => {
            let input = required(&cfg.input, "--input")?;
            let reference = required(&cfg.reference, "--reference")?;
            digest(input)?;
            digest(reference)?;
            let (_, e1) = read_matrices(input)?;
            let (_, e2) = read_matrices(reference)?;
            let emb = embedding(&cfg, &e2, &mut digest)?;
            let sub = Subsampling {
                draws: cfg.draws,
                fraction: cfg.fraction,
                seed: cfg.seed,
            };
            let est = frechet_with_error(&e1, &e2, &emb, &sub)?;
            Evaluation {
                value: finite(est.value),
                error: finite(est.error),
                details: json!({
                    "subsample_mean": finite(est.mean),
                    "embedding_dim": emb.dim(e2[0].n()),
                    "input_count": e1.len(),
                    "reference_count": e2.len(),
                }),
            }
        }
        MetricKind::Fidfit => {
            let points_path = required(&cfg.points, "--points")?;
            digest(points_path)?;
            let points = read_points(points_path)?;
            let reference = match (cfg.ref_fid, cfg.ref_mu) {
                (Some(fid), Some(mu)) => Some(FidReference { fid, mu }),
                (None, None) => None,
                _ => return Err(usage("--ref-fid and --ref-mu go together")),
            };
            let fit = fid_scaling_fit(&points, reference)?;
            let (value, quantity) = match fit.log10_m_star {
                Some(m) => (m, "log10_m_star"),
                None => (fit.gamma, "gamma"),
            };
            Evaluation {
                value: finite(value),
                error: Value::Null,
                details: json!({
                    "quantity": quantity,
                    "a": fit.a,
                    "gamma": fit.gamma,
                    "intercept": fit.intercept,
                    "log10_m_star": fit.log10_m_star,
                    "residuals": fit.residuals,
                }),
            }
        }
    };
    let report = json!({
        "metric": metric.name(),
        "value": eval.value,
        "error": eval.error,
        "config": serde_json::to_value(&cfg)?,
        "inputs": digests,
        "details": eval.details,
    });
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
        write_sidecar(out, "metrics", &cfg)?;
    }
    Ok(Outcome::ok(json!({
        "command": "metrics",
        "metric": metric.name(),
        "value": report["value"],
        "error": report["error"],
        "out": cfg.out,
    })))
}

fn rmse(input: &Path, reference: &Path, mask: &Path) -> CliResult<Evaluation> {
    let (_, a) = read_matrices(input)?;
    let (_, t) = read_matrices(reference)?;
    if a.len() != t.len() || a[0].n() != t[0].n() {
        return Err(usage("--input and --reference differ in count or size"));
    }
    let masks = read_masks_for(mask, a.len(), a[0].n())?;
    let mut values = Vec::with_capacity(a.len());
    for ((a, t), b) in a.iter().zip(&t).zip(&masks) {
        if b.complement().known_count() > 0 {
            values.push(rmse_masked(a, t, b)?);
        }
    }
    let (mean, err) = mean_err(&values);
    Ok(Evaluation {
        value: finite(mean),
        error: finite(err),
        details: json!({ "scored": values.len(), "units": "raw distance", "per_instance": values }),
    })
}

fn embedding(
    cfg: &MetricsConfig,
    reference: &[DistanceMatrix],
    digest: &mut impl FnMut(&Path) -> CliResult<()>,
) -> CliResult<EnsembleEmbedding> {
    match cfg.embedding {
        EmbeddingKind::Identity => Ok(EnsembleEmbedding::Identity),
        EmbeddingKind::Pca => {
            if let Some(p) = cfg.pca_file.as_ref().filter(|p| p.exists()) {
                digest(p)?;
                let file = PcaeFile::from_bytes(&std::fs::read(p)?).map_err(|source| CliError::Input {
                    path: p.clone(),
                    source,
                })?;
                return Ok(EnsembleEmbedding::Pca(PcaEmbedding::from_file(&file)?));
            }
            let pca = fit_pca(reference, cfg.pca_dim)?;
            if let Some(p) = &cfg.pca_file {
                write_atomic(p, &pca.to_file().to_bytes()?)?;
            }
            Ok(EnsembleEmbedding::Pca(pca))
        }
    }
}

#[derive(Deserialize)]
struct Point {
    m: f64,
    mu: f64,
    fid: f64,
}

fn read_points(path: &Path) -> CliResult<Vec<(f64, f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let p: Point = row?;
        out.push((p.m, p.mu, p.fid));
    }
    Ok(out)
}
