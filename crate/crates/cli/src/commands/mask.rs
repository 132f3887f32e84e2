use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::edm::{random_mask_indexed, row_col_mask, Mask};
use edmkit::io::write_masks;
use edmkit::rigidity::{is_rigid, DEFAULT_MIN_LINKS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;

/// Draw observation masks (MASK container).
#[derive(Debug, Args)]
pub struct MaskArgs {
    /// EDMD file whose size and count the masks follow.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Probability that a pair is unknown.
    #[arg(long, value_parser = parse_fraction)]
    mu: Option<f64>,
    /// Hide whole rows and columns (0-based) instead of random pairs.
    #[arg(long, value_delimiter = ',')]
    drop_rows: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub input: Option<PathBuf>,
    pub n: Option<usize>,
    pub count: Option<usize>,
    pub mu: f64,
    pub drop_rows: Vec<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Report the fraction of masks passing the rigidity test.
    pub rigidity: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            input: None,
            n: None,
            count: None,
            mu: 0.5,
            drop_rows: Vec::new(),
            seed: 0,
            out: None,
            rigidity: true,
        }
    }
}

pub fn run(args: MaskArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: MaskConfig = load_config(config, "mask")?;
    overlay!(cfg, args; mu, drop_rows, seed);
    overlay_opt!(cfg, args; input, n, count, out);
    let out = required(&cfg.out, "--out")?.clone();
    let (n, count) = match &cfg.input {
        Some(p) => {
            let b = read_edmd(p)?;
            if cfg.n.is_some_and(|n| n != b.n) {
                return Err(usage(format!(
                    "--n {} does not match {} (n={})",
                    cfg.n.unwrap(),
                    p.display(),
                    b.n
                )));
            }
            (b.n, cfg.count.unwrap_or(b.matrices.len()))
        }
        None => (*required(&cfg.n, "--n or --input")?, cfg.count.unwrap_or(1)),
    };
    if count == 0 {
        return Err(usage("count must be at least 1"));
    }
    let masks: Vec<Mask> = if cfg.drop_rows.is_empty() {
        (0..count as u64)
            .into_par_iter()
            .map(|k| random_mask_indexed(n, cfg.mu, cfg.seed, k))
            .collect::<edmkit::Result<_>>()?
    } else {
        vec![row_col_mask(n, &cfg.drop_rows)?; count]
    };
    write_masks(&out, &masks)?;
    let sidecar = write_sidecar(&out, "mask", &cfg)?;
    let (missing, _) = mean_err(&masks.iter().map(Mask::missing_ratio).collect::<Vec<_>>());
    let rigid = cfg.rigidity.then(|| {
        let r = masks
            .par_iter()
            .filter(|m| is_rigid(m, DEFAULT_MIN_LINKS).rigid)
            .count();
        r as f64 / count as f64
    });
    Ok(Outcome::ok(json!({
        "command": "mask",
        "out": out,
        "config": sidecar,
        "count": count,
        "n": n,
        "missing_ratio": missing,
        "rigid_fraction": rigid,
    })))
}
