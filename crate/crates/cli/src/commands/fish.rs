use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::diffusion::SamplerConfig;
use edmkit::fish::{impute_cells, parse_fish_table, prepare_tasks, select_cells, DropSpec, FishConfig, FishMethod};
use edmkit::io::EdmBatch;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;
use crate::engine::Denoiser;

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FishMethodArg {
    Nn,
    Mean,
    Ddpm,
    Repaint,
    Ddrm,
    Ddnm,
}

impl From<FishMethodArg> for FishMethod {
    fn from(m: FishMethodArg) -> Self {
        match m {
            FishMethodArg::Nn => FishMethod::Nn,
            FishMethodArg::Mean => FishMethod::EnsembleMean,
            FishMethodArg::Ddpm => FishMethod::Ddpm,
            FishMethodArg::Repaint => FishMethod::Repaint,
            FishMethodArg::Ddrm => FishMethod::Ddrm,
            FishMethodArg::Ddnm => FishMethod::Ddnm,
        }
    }
}

/// Impute held-out probes of chromatin-tracing cells.
#[derive(Debug, Args)]
pub struct FishArgs {
    /// Table with columns segment, chromosome, n, z, x, y.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<FishMethodArg>,
    /// Keep only cells with exactly this many absent probes.
    #[arg(long)]
    missing_rows: Option<usize>,
    /// Drop this many random present probes per cell.
    #[arg(long, conflicts_with = "drop_probes")]
    drop_random: Option<usize>,
    /// Drop these probes (1-based) in every cell.
    #[arg(long, value_delimiter = ',')]
    drop_probes: Option<Vec<usize>>,
    /// EPSW weight file for diffusion methods.
    #[arg(long)]
    model: Option<PathBuf>,
    /// EDMD training set (squared nm) for the analytic Gaussian oracle.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Posterior draws averaged per cell.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// EDMD output of completed distances (nm, not squared).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report (default `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FishCmdConfig {
    pub input: Option<PathBuf>,
    pub method: FishMethod,
    pub missing_rows: Option<usize>,
    pub drop: DropSpec,
    pub model: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub samples: usize,
    pub rank: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for FishCmdConfig {
    fn default() -> Self {
        Self {
            input: None,
            method: FishMethod::Nn,
            missing_rows: None,
            drop: DropSpec::Random(10),
            model: None,
            oracle: None,
            sampler: SamplerConfig::default(),
            samples: 1,
            rank: 5,
            seed: 0,
            out: None,
            report: None,
        }
    }
}

pub fn run(args: FishArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: FishCmdConfig = load_config(config, "fish")?;
    overlay!(cfg, args; samples, seed);
    overlay_opt!(cfg, args; input, missing_rows, model, oracle, out, report);
    if let Some(m) = args.method {
        cfg.method = m.into();
    }
    if let Some(k) = args.drop_random {
        cfg.drop = DropSpec::Random(k);
    }
    if let Some(p) = args.drop_probes {
        cfg.drop = DropSpec::Probes(p);
    }
    if let Some(v) = args.steps {
        cfg.sampler.steps = v;
    }
    cfg.sampler.validate()?;
    let input = required(&cfg.input, "--input")?.clone();
    let out = required(&cfg.out, "--out")?.clone();

    let cells = parse_fish_table(BufReader::new(File::open(&input)?)).map_err(|source| CliError::Input {
        path: input.clone(),
        source,
    })?;
    let cells = match cfg.missing_rows {
        Some(k) => select_cells(&cells, k),
        None => cells,
    };
    if cells.is_empty() {
        return Err(usage("no cells selected"));
    }
    let n = cells[0].len();
    if cells.iter().any(|c| c.len() != n) {
        return Err(usage("cells differ in probe count; one output file needs equal sizes"));
    }
    let tasks = prepare_tasks(&cells, &cfg.drop, cfg.seed)?;
    let denoiser = if cfg.method.inpaint_method().is_some() {
        Some(
            Denoiser::load(cfg.model.as_deref(), cfg.oracle.as_deref())?
                .ok_or_else(|| usage(format!("method {} needs --model or --oracle", cfg.method.name())))?,
        )
    } else {
        None
    };
    let model = denoiser.as_ref().map(Denoiser::view);
    let fish_cfg = FishConfig {
        method: cfg.method,
        sampler: cfg.sampler.clone(),
        seed: cfg.seed,
        rank: cfg.rank,
        samples: cfg.samples,
    };
    let outcome = impute_cells(&tasks, &fish_cfg, model.as_ref())?;
    let matrices: Vec<DMatrix<f64>> = outcome.completed.iter().map(|m| m.matrix().map(f64::sqrt)).collect();
    EdmBatch {
        n,
        hurst: None,
        squared: false,
        matrices,
    }
    .write(&out)?;
    let report = report_path(&out, &cfg.report);
    let s = &outcome.summary;
    write_json(
        &report,
        &json!({
            "method": s.method.name(),
            "rmse_mean": s.rmse_mean,
            "rmse_err": s.rmse_err,
            "rank_mean": s.rank_mean,
            "rmse_units": s.rmse_units,
            "model_hurst": s.model_hurst,
            "model": denoiser.as_ref().map(Denoiser::describe),
            "cells": s.cells,
        }),
    )?;
    let sidecar = write_sidecar(&out, "fish", &cfg)?;
    let fallback: usize = s.cells.iter().map(|c| c.fallback_entries).sum();
    Ok(Outcome::ok(json!({
        "command": "fish",
        "method": s.method.name(),
        "cells": s.cells.len(),
        "rmse_mean": s.rmse_mean,
        "rmse_err": s.rmse_err,
        "rank_mean": s.rank_mean,
        "fallback_entries": fallback,
        "out": out,
        "report": report,
        "config": sidecar,
    })))
}
