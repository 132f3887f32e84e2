use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::complete::CompletionConfig;
use edmkit::diffusion::SamplerConfig;
use edmkit::edm::{Mask, MaskedMatrix};
use edmkit::io::EdmBatch;
use edmkit::metrics::{rmse_masked, rmse_normalized};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;
use crate::engine::{CliMethod, Denoiser, Engine};

/// Complete partially observed matrices.
#[derive(Debug, Args)]
pub struct CompleteArgs {
    /// EDMD file; entries hidden by the mask are ignored.
    #[arg(long)]
    input: Option<PathBuf>,
    /// MASK file (one mask, or one per matrix). Without it all pairs are known.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Ground truth for per-instance RMSE over the unknown pairs.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<CliMethod>,
    /// Reference EDMD for database search.
    #[arg(long)]
    database: Option<PathBuf>,
    /// EPSW weight file for diffusion methods.
    #[arg(long)]
    model: Option<PathBuf>,
    /// EDMD training set for the analytic Gaussian oracle (instead of --model).
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Sampling steps (diffusion methods).
    #[arg(long)]
    steps: Option<usize>,
    /// Posterior draws averaged per instance (diffusion methods).
    #[arg(long)]
    samples: Option<usize>,
    /// Shrinkage as a fraction of the mean known entry (FISTA).
    #[arg(long)]
    beta_scale: Option<f64>,
    /// Random restarts (OPT).
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// EDMD output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report (default `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompleteConfig {
    pub input: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub method: CliMethod,
    pub database: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub completion: CompletionConfig,
    pub sampler: SamplerConfig,
    pub samples: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for CompleteConfig {
    fn default() -> Self {
        Self {
            input: None,
            mask: None,
            truth: None,
            method: CliMethod::Fista,
            database: None,
            model: None,
            oracle: None,
            completion: CompletionConfig::default(),
            sampler: SamplerConfig::default(),
            samples: 1,
            seed: 0,
            out: None,
            report: None,
        }
    }
}

pub fn run(args: CompleteArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: CompleteConfig = load_config(config, "complete")?;
    overlay!(cfg, args; method, samples, seed);
    overlay_opt!(cfg, args; input, mask, truth, database, model, oracle, out, report);
    if let Some(v) = args.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = args.beta_scale {
        cfg.completion.beta_scale = v;
    }
    if let Some(v) = args.restarts {
        cfg.completion.opt_restarts = v;
    }
    cfg.completion.validate()?;
    cfg.sampler.validate()?;
    let input = required(&cfg.input, "--input")?.clone();
    let out = required(&cfg.out, "--out")?.clone();

    let (batch, matrices) = read_matrices(&input)?;
    let (n, count) = (batch.n, matrices.len());
    let masks = match &cfg.mask {
        Some(p) => read_masks_for(p, count, n)?,
        None => vec![Mask::all_known(n); count],
    };
    let inputs: Vec<MaskedMatrix> = matrices
        .iter()
        .zip(masks)
        .map(|(m, b)| MaskedMatrix::new(m, b))
        .collect::<edmkit::Result<_>>()?;
    let truth = match &cfg.truth {
        Some(p) => {
            let (_, t) = read_matrices(p)?;
            if t.len() != count || t[0].n() != n {
                return Err(usage(format!("{}: truth does not match the input", p.display())));
            }
            Some(t)
        }
        None => None,
    };
    let database = match &cfg.database {
        Some(p) => Some(read_matrices(p)?.1),
        None => None,
    };
    let denoiser = if cfg.method.inpaint().is_some() {
        Denoiser::load(cfg.model.as_deref(), cfg.oracle.as_deref())?
    } else {
        None
    };
    let engine = Engine::new(
        &cfg.completion,
        &cfg.sampler,
        cfg.samples,
        database.as_deref(),
        denoiser.as_ref(),
    )?;
    let results = engine.run(cfg.method, &inputs, cfg.seed)?;

    let mut stored = Vec::with_capacity(count);
    let mut instances = Vec::with_capacity(count);
    let mut failed = Vec::new();
    let mut rmses = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => {
                let mut rec = json!({
                    "index": k,
                    "iterations": c.iterations,
                    "loss": c.loss,
                    "fallback_entries": c.fallback_entries,
                    "matched_index": c.matched_index,
                });
                if let Some(t) = &truth {
                    let unknown = inputs[k].mask();
                    if unknown.known_count() < n * (n - 1) / 2 {
                        let rmse = rmse_masked(&c.matrix, &t[k], unknown)?;
                        rec["rmse"] = rmse.into();
                        rec["rmse_normalized"] = rmse_normalized(&c.matrix, &t[k], unknown).ok().into();
                        rmses.push(rmse);
                    }
                }
                instances.push(rec);
                stored.push(c.matrix.into_matrix());
            }
            Err(e) => {
                failed.push(format!("instance {k}: {e}"));
                instances.push(json!({ "index": k, "error": e.to_string() }));
                stored.push(DMatrix::from_element(n, n, f64::NAN));
            }
        }
    }
    EdmBatch {
        n,
        hurst: batch.hurst,
        squared: batch.squared,
        matrices: stored,
    }
    .write(&out)?;
    let (rmse_mean, rmse_err) = mean_err(&rmses);
    let report = report_path(&out, &cfg.report);
    write_json(
        &report,
        &json!({
            "method": cfg.method.name(),
            "count": count,
            "rmse_mean": finite(rmse_mean),
            "rmse_err": finite(rmse_err),
            "rmse_units": "raw distance",
            "model": denoiser.as_ref().map(Denoiser::describe),
            "instances": instances,
            "failed": failed,
        }),
    )?;
    let sidecar = write_sidecar(&out, "complete", &cfg)?;
    Ok(Outcome {
        summary: json!({
            "command": "complete",
            "method": cfg.method.name(),
            "count": count,
            "failed": failed.len(),
            "rmse_mean": finite(rmse_mean),
            "rmse_err": finite(rmse_err),
            "out": out,
            "report": report,
            "config": sidecar,
        }),
        failed,
    })
}
