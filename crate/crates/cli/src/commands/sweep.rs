use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::Args;
use edmkit::complete::CompletionConfig;
use edmkit::diffusion::SamplerConfig;
use edmkit::edm::{random_mask_indexed, rank_fraction, DistanceMatrix, MaskedMatrix, RankNorm};
use edmkit::io::write_atomic;
use edmkit::metrics::{fit_pca, frechet_with_error, rmse_masked, EnsembleEmbedding, Subsampling};
use edmkit::rigidity::{is_rigid, DEFAULT_MIN_LINKS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::common::*;
use crate::engine::{CliMethod, Completed, Denoiser, Engine};

/// Missing-ratio sweep: mask, complete and score at every μ.
#[derive(Debug, Args)]
pub struct SweepArgs {
    /// EDMD dataset; the first `--instances` matrices are the ground truth.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<CliMethod>>,
    /// Explicit missing ratios (otherwise `--mu-count` values from 0.01 to 0.99).
    #[arg(long, value_delimiter = ',', value_parser = parse_fraction)]
    mu: Option<Vec<f64>>,
    #[arg(long)]
    mu_count: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    /// Reference EDMD for db (default: the input matrices after the instances).
    #[arg(long)]
    database: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Subsampling draws for the FID error bar.
    #[arg(long)]
    draws: Option<usize>,
    /// Skip the FID columns.
    #[arg(long)]
    no_fid: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV table; rows already present for the same seed are kept and skipped.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub input: Option<PathBuf>,
    pub methods: Vec<CliMethod>,
    pub mu: Vec<f64>,
    pub mu_count: usize,
    pub instances: usize,
    pub database: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub completion: CompletionConfig,
    pub sampler: SamplerConfig,
    pub samples: usize,
    pub fid: bool,
    pub draws: usize,
    /// PCA components for the FID, capped by `instances − 1`.
    pub fid_dim: usize,
    pub rank: usize,
    pub rigidity: bool,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            input: None,
            methods: vec![CliMethod::Fista, CliMethod::Nn],
            mu: Vec::new(),
            mu_count: 100,
            instances: 20,
            database: None,
            model: None,
            oracle: None,
            completion: CompletionConfig::default(),
            sampler: SamplerConfig::default(),
            samples: 1,
            fid: true,
            draws: 20,
            fid_dim: 64,
            rank: 5,
            rigidity: true,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Row {
    pub mu: f64,
    pub method: String,
    pub rmse: Option<f64>,
    pub rmse_err: Option<f64>,
    pub fid: Option<f64>,
    pub fid_err: Option<f64>,
    pub rank: Option<f64>,
    pub rigid_fraction: Option<f64>,
    pub seed: u64,
}

/// Seed of the masks and chains at `mu`, independent of the μ list.
fn mu_seed(seed: u64, mu: f64) -> u64 {
    seed ^ ((mu * 1e6).round() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn some(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn run(args: SweepArgs, config: Option<&Path>) -> CliResult<Outcome> {
    let mut cfg: SweepConfig = load_config(config, "sweep")?;
    overlay!(cfg, args; methods, mu, mu_count, instances, samples, draws, seed);
    overlay_opt!(cfg, args; input, database, model, oracle, out);
    if let Some(v) = args.steps {
        cfg.sampler.steps = v;
    }
    cfg.fid &= !args.no_fid;
    cfg.completion.validate()?;
    cfg.sampler.validate()?;
    let input = required(&cfg.input, "--input")?.clone();
    let out = required(&cfg.out, "--out")?.clone();
    if cfg.methods.is_empty() || cfg.instances == 0 {
        return Err(usage("need at least one method and one instance"));
    }
    let mus: Vec<f64> = if cfg.mu.is_empty() {
        match cfg.mu_count {
            0 => return Err(usage("--mu-count must be at least 1")),
            1 => vec![0.5],
            c => (0..c).map(|k| 0.01 + 0.98 * k as f64 / (c - 1) as f64).collect(),
        }
    } else {
        cfg.mu.clone()
    };
    if let Some(bad) = mus.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(usage(format!("missing ratio {bad} outside [0, 1]")));
    }

    let (_, mut ms) = read_matrices(&input)?;
    let rest = ms.split_off(cfg.instances.min(ms.len()));
    let truth = ms;
    let n = truth[0].n();
    let database = match &cfg.database {
        Some(p) => Some(read_matrices(p)?.1),
        None if !rest.is_empty() => Some(rest),
        None => None,
    };
    let denoiser = if cfg.methods.iter().any(|m| m.inpaint().is_some()) {
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
    for &m in &cfg.methods {
        engine.check(m)?;
    }

    let mut rows = if out.exists() { read_rows(&out)? } else { Vec::new() };
    let done: HashSet<(u64, String)> = rows
        .iter()
        .filter(|r| r.seed == cfg.seed)
        .map(|r| (r.mu.to_bits(), r.method.clone()))
        .collect();
    let (mut computed, mut skipped) = (0usize, 0usize);
    let mut failed = Vec::new();
    for &mu in &mus {
        let todo: Vec<CliMethod> = cfg
            .methods
            .iter()
            .copied()
            .filter(|m| !done.contains(&(mu.to_bits(), m.name().to_string())))
            .collect();
        skipped += cfg.methods.len() - todo.len();
        if todo.is_empty() {
            continue;
        }
        let s = mu_seed(cfg.seed, mu);
        let inputs: Vec<MaskedMatrix> = truth
            .iter()
            .enumerate()
            .map(|(k, t)| MaskedMatrix::new(t, random_mask_indexed(n, mu, s, k as u64)?))
            .collect::<edmkit::Result<_>>()?;
        let rigid = cfg.rigidity.then(|| {
            let r = inputs
                .par_iter()
                .filter(|pm| is_rigid(pm.mask(), DEFAULT_MIN_LINKS).rigid)
                .count();
            r as f64 / inputs.len() as f64
        });
        for method in todo {
            let results = engine.run(method, &inputs, s)?;
            match score(&cfg, &truth, &inputs, results) {
                Ok(stats) => {
                    rows.push(Row {
                        mu,
                        method: method.name().into(),
                        rigid_fraction: rigid,
                        seed: cfg.seed,
                        ..stats
                    });
                    computed += 1;
                }
                Err(e) => failed.push(format!("mu={mu} method={}: {e}", method.name())),
            }
        }
        write_rows(&out, &rows)?;
    }
    if computed == 0 && !out.exists() {
        write_rows(&out, &rows)?;
    }
    let sidecar = write_sidecar(&out, "sweep", &cfg)?;
    Ok(Outcome {
        summary: json!({
            "command": "sweep",
            "out": out,
            "config": sidecar,
            "rows": rows.len(),
            "computed": computed,
            "skipped": skipped,
            "failed": failed.len(),
        }),
        failed,
    })
}

/// Row statistics for one method at one μ. Blank statistics mean there was
/// nothing observed to complete from.
fn score(
    cfg: &SweepConfig,
    truth: &[DistanceMatrix],
    inputs: &[MaskedMatrix],
    results: Vec<edmkit::Result<Completed>>,
) -> edmkit::Result<Row> {
    let mut blank = Row {
        mu: f64::NAN,
        method: String::new(),
        rmse: None,
        rmse_err: None,
        fid: None,
        fid_err: None,
        rank: None,
        rigid_fraction: None,
        seed: cfg.seed,
    };
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(c) => done.push(c.matrix),
            Err(edmkit::Error::NoKnownEntries) => return Ok(blank),
            Err(e) => return Err(e),
        }
    }
    let mut rmses = Vec::new();
    for ((a, t), pm) in done.iter().zip(truth).zip(inputs) {
        if pm.mask().complement().known_count() > 0 {
            rmses.push(rmse_masked(a, t, pm.mask())?);
        }
    }
    let (rmse, rmse_err) = if rmses.is_empty() { (0.0, 0.0) } else { mean_err(&rmses) };
    let ranks: Vec<f64> = done
        .iter()
        .map(|a| rank_fraction(a, cfg.rank.min(a.n()), RankNorm::SpectralL2))
        .collect::<edmkit::Result<_>>()?;
    blank.rmse = some(rmse);
    blank.rmse_err = some(rmse_err);
    blank.rank = some(mean_err(&ranks).0);
    if cfg.fid && done.len() >= 3 {
        let n = truth[0].n();
        let k = cfg.fid_dim.min(n * (n - 1) / 2).min(truth.len() - 1);
        let emb = EnsembleEmbedding::Pca(fit_pca(truth, k)?);
        let sub = Subsampling {
            draws: cfg.draws.max(2),
            fraction: 0.9,
            seed: cfg.seed,
        };
        let est = frechet_with_error(&done, truth, &emb, &sub)?;
        blank.fid = some(est.value);
        blank.fid_err = some(est.error);
    }
    Ok(blank)
}

fn read_rows(path: &Path) -> CliResult<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

fn write_rows(path: &Path, rows: &[Row]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "mu",
            "method",
            "rmse",
            "rmse_err",
            "fid",
            "fid_err",
            "rank",
            "rigid_fraction",
            "seed",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}
