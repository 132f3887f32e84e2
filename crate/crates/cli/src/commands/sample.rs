use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::diffusion::{ddpm_sample, postprocess_edm, SamplerConfig};
use edmkit::io::EdmBatch;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;
use crate::engine::Denoiser;

/// Unconditional DDPM samples.
#[derive(Debug, Args)]
pub struct SampleArgs {
    /// EPSW weight file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// EDMD training set for the analytic Gaussian oracle (instead of --model).
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Store denormalized images without symmetrizing or clipping.
    #[arg(long)]
    raw: bool,
    /// EDMD output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub model: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub count: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub raw: bool,
    pub out: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            model: None,
            oracle: None,
            count: 10,
            sampler: SamplerConfig::default(),
            seed: 0,
            raw: false,
            out: None,
        }
    }
}

pub fn run(args: SampleArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: SampleConfig = load_config(config, "sample")?;
    overlay!(cfg, args; count, seed);
    overlay_opt!(cfg, args; model, oracle, out);
    if let Some(v) = args.steps {
        cfg.sampler.steps = v;
    }
    cfg.raw |= args.raw;
    cfg.sampler.validate()?;
    let out = required(&cfg.out, "--out")?.clone();
    if cfg.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let denoiser = Denoiser::load(cfg.model.as_deref(), cfg.oracle.as_deref())?
        .ok_or_else(|| usage("--model or --oracle is required"))?;
    let model = denoiser.view();
    let n = model.predictor.size();
    let chain = cfg.sampler.chain(model.schedule)?;
    let raw = ddpm_sample(model.predictor, &chain, &cfg.sampler, cfg.count, cfg.seed)?;
    let norm = model.normalization;
    let (matrices, reports): (Vec<DMatrix<f64>>, Vec<_>) = if cfg.raw {
        let ms = raw
            .iter()
            .map(|x| DMatrix::from_row_iterator(n, n, x.iter().map(|v| norm.denormalize(*v))))
            .collect();
        (ms, Vec::new())
    } else {
        raw.par_iter()
            .map(|x| postprocess_edm(x, &norm).map(|(m, r)| (m.into_matrix(), r)))
            .collect::<edmkit::Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    };
    let hurst = norm.hurst.is_finite().then_some(norm.hurst);
    EdmBatch {
        n,
        hurst,
        squared: true,
        matrices,
    }
    .write(&out)?;
    let sidecar = write_sidecar(&out, "sample", &cfg)?;
    let max = |f: fn(&edmkit::diffusion::PostprocessReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    Ok(Outcome::ok(json!({
        "command": "sample",
        "out": out,
        "config": sidecar,
        "count": cfg.count,
        "n": n,
        "steps": chain.len(),
        "model": denoiser.describe(),
        "postprocessed": !cfg.raw,
        "max_asymmetry": (!cfg.raw).then(|| max(|r| r.max_asymmetry)),
        "max_clipped": (!cfg.raw).then(|| max(|r| r.max_clipped)),
        "max_diagonal": (!cfg.raw).then(|| max(|r| r.max_diagonal)),
    })))
}
