use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::edm::{edm_from_trajectory, DistanceMatrix};
use edmkit::fbm::{generate_fbm, FbmParams};
use edmkit::io::{EdmBatch, TrajectoryBatch};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;

/// Synthesize fBm trajectories and their squared-distance matrices.
#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Hurst exponent in (0, 1).
    #[arg(long, value_parser = parse_hurst)]
    hurst: Option<f64>,
    /// Points per trajectory.
    #[arg(long)]
    n: Option<usize>,
    /// Number of trajectories.
    #[arg(long)]
    count: Option<usize>,
    /// Spatial dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Root mean squared single-step displacement.
    #[arg(long)]
    step_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// EDMD output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the trajectories (TRAJ container).
    #[arg(long)]
    trajectories: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub hurst: Option<f64>,
    pub n: usize,
    pub count: usize,
    pub dim: usize,
    pub step_scale: f64,
    pub unit_coordinate_variance: bool,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            hurst: None,
            n: 64,
            count: 1000,
            dim: 3,
            step_scale: 1.0,
            unit_coordinate_variance: false,
            seed: 0,
            out: None,
            trajectories: None,
        }
    }
}

pub fn run(args: GenerateArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: GenerateConfig = load_config(config, "generate")?;
    overlay!(cfg, args; n, count, dim, step_scale, seed);
    overlay_opt!(cfg, args; hurst, out, trajectories);
    let hurst = *required(&cfg.hurst, "--hurst")?;
    let out = required(&cfg.out, "--out")?.clone();
    let params = FbmParams {
        hurst,
        step_scale: cfg.step_scale,
        n_points: cfg.n,
        dim: cfg.dim,
        unit_coordinate_variance: cfg.unit_coordinate_variance,
    };
    params.validate()?;
    let trajectories = generate_fbm(&params, cfg.count, cfg.seed)?;
    let matrices: Vec<DistanceMatrix> = trajectories.par_iter().map(edm_from_trajectory).collect();
    EdmBatch::from_distance_matrices(&matrices, Some(hurst))?.write(&out)?;
    drop(matrices);
    if let Some(p) = &cfg.trajectories {
        TrajectoryBatch {
            n: cfg.n,
            dim: cfg.dim,
            hurst,
            step_scale: cfg.step_scale,
            trajectories,
        }
        .write(p)?;
    }
    let sidecar = write_sidecar(&out, "generate", &cfg)?;
    Ok(Outcome::ok(json!({
        "command": "generate",
        "out": out,
        "config": sidecar,
        "count": cfg.count,
        "n": cfg.n,
        "dim": cfg.dim,
        "hurst": hurst,
        "seed": cfg.seed,
    })))
}
