use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::edm::{random_mask_indexed, Mask};
use edmkit::io::read_masks;
use edmkit::rigidity::{is_rigid_with, AdoptionRule, RigidityResult, DEFAULT_MIN_LINKS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;

/// Greedy rigidity test on stored masks, or the rigid fraction of random masks.
#[derive(Debug, Args)]
pub struct RigidityArgs {
    /// MASK file to test.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Random masks of this size when no file is given.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_parser = parse_fraction)]
    mu: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_links: Option<usize>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    /// Per-mask results as a JSON array.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RuleArg {
    Sound,
    Literal,
}

impl From<RuleArg> for AdoptionRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Sound => AdoptionRule::Sound,
            RuleArg::Literal => AdoptionRule::Literal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidityConfig {
    pub mask: Option<PathBuf>,
    pub n: Option<usize>,
    pub mu: f64,
    pub trials: usize,
    pub seed: u64,
    pub min_links: usize,
    pub rule: AdoptionRule,
    pub out: Option<PathBuf>,
}

impl Default for RigidityConfig {
    fn default() -> Self {
        Self {
            mask: None,
            n: None,
            mu: 0.5,
            trials: 100,
            seed: 0,
            min_links: DEFAULT_MIN_LINKS,
            rule: AdoptionRule::Sound,
            out: None,
        }
    }
}

pub fn run(args: RigidityArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: RigidityConfig = load_config(config, "rigidity")?;
    overlay!(cfg, args; mu, trials, seed, min_links);
    overlay_opt!(cfg, args; mask, n, out);
    if let Some(r) = args.rule {
        cfg.rule = r.into();
    }
    let masks: Vec<Mask> = match (&cfg.mask, cfg.n) {
        (Some(p), _) => read_masks(p).map_err(|source| CliError::Input {
            path: p.clone(),
            source,
        })?,
        (None, Some(n)) => {
            if cfg.trials == 0 {
                return Err(usage("--trials must be at least 1"));
            }
            (0..cfg.trials as u64)
                .into_par_iter()
                .map(|k| random_mask_indexed(n, cfg.mu, cfg.seed, k))
                .collect::<edmkit::Result<_>>()?
        }
        (None, None) => return Err(usage("give --mask or --n")),
    };
    let results: Vec<RigidityResult> = masks
        .par_iter()
        .map(|m| is_rigid_with(m, cfg.min_links, cfg.rule))
        .collect();
    if let Some(out) = &cfg.out {
        write_json(out, &serde_json::to_value(&results)?)?;
        write_sidecar(out, "rigidity", &cfg)?;
    }
    let rigid = results.iter().filter(|r| r.rigid).count();
    let mut summary = json!({
        "command": "rigidity",
        "count": results.len(),
        "rigid_count": rigid,
        "rigid_fraction": rigid as f64 / results.len().max(1) as f64,
        "out": cfg.out,
    });
    if let [single] = results.as_slice() {
        let obj = summary.as_object_mut().expect("object");
        obj.insert("rigid".into(), single.rigid.into());
        obj.insert("order".into(), json!(single.order));
        obj.insert("seed_clique".into(), json!(single.seed_clique));
    }
    Ok(Outcome::ok(summary))
}
