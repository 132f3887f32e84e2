//! Denoiser loading and method dispatch shared by `complete`, `sample`,
//! `fish` and `sweep`.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use edmkit::complete::{complete_batch, db_search_complete, ensemble_mean_complete_all, CompletionConfig, Method};
use edmkit::diffusion::weights::{load_predictor, UnetPredictor};
use edmkit::diffusion::{
    analytic_epsilon, default_schedule, diffusion_complete, AnalyticEpsilon, DiffusionModel, GaussianEnsembleSpec,
    InpaintMethod, NoiseSchedule, NormalizationSpec, SamplerConfig,
};
use edmkit::edm::{DistanceMatrix, MaskedMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::common::{read_matrices, usage, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CliMethod {
    Fista,
    Opt,
    Nn,
    Db,
    Mean,
    Ddpm,
    Repaint,
    Ddrm,
    Ddnm,
}

impl CliMethod {
    pub fn name(self) -> &'static str {
        match self {
            CliMethod::Fista => "fista",
            CliMethod::Opt => "opt",
            CliMethod::Nn => "nn",
            CliMethod::Db => "db",
            CliMethod::Mean => "mean",
            CliMethod::Ddpm => "ddpm",
            CliMethod::Repaint => "repaint",
            CliMethod::Ddrm => "ddrm",
            CliMethod::Ddnm => "ddnm",
        }
    }

    pub fn inpaint(self) -> Option<InpaintMethod> {
        match self {
            CliMethod::Ddpm => Some(InpaintMethod::Ddpm),
            CliMethod::Repaint => Some(InpaintMethod::Repaint),
            CliMethod::Ddrm => Some(InpaintMethod::Ddrm),
            CliMethod::Ddnm => Some(InpaintMethod::Ddnm),
            _ => None,
        }
    }
}

/// A trained network or the analytic Gaussian oracle fitted to a dataset.
pub enum Denoiser {
    Unet {
        path: PathBuf,
        net: Box<UnetPredictor>,
    },
    Oracle {
        path: PathBuf,
        eps: Box<AnalyticEpsilon>,
        norm: NormalizationSpec,
    },
}

impl Denoiser {
    /// `model` is an EPSW file, `oracle` an EDMD dataset of squared distances.
    pub fn load(model: Option<&Path>, oracle: Option<&Path>) -> CliResult<Option<Self>> {
        match (model, oracle) {
            (Some(_), Some(_)) => Err(usage("--model and --oracle are mutually exclusive")),
            (Some(p), None) => {
                let net = load_predictor(p).map_err(|source| CliError::Input {
                    path: p.to_owned(),
                    source,
                })?;
                Ok(Some(Denoiser::Unet {
                    path: p.to_owned(),
                    net: Box::new(net),
                }))
            }
            (None, Some(p)) => {
                let (batch, ms) = read_matrices(p)?;
                if !batch.squared {
                    return Err(usage(format!("{}: the oracle needs squared distances", p.display())));
                }
                let norm = NormalizationSpec::fit(&ms, batch.hurst.unwrap_or(f64::NAN))?;
                let spec = GaussianEnsembleSpec::fit_matrices(&ms, &norm)?;
                let eps = analytic_epsilon(&spec, &default_schedule());
                Ok(Some(Denoiser::Oracle {
                    path: p.to_owned(),
                    eps: Box::new(eps),
                    norm,
                }))
            }
            (None, None) => Ok(None),
        }
    }

    pub fn view(&self) -> DiffusionModel<'_> {
        match self {
            Denoiser::Unet { net, .. } => DiffusionModel {
                predictor: net.as_ref(),
                schedule: net.schedule(),
                normalization: *net.normalization(),
            },
            Denoiser::Oracle { eps, norm, .. } => DiffusionModel {
                predictor: eps.as_ref(),
                schedule: eps.schedule(),
                normalization: *norm,
            },
        }
    }

    pub fn describe(&self) -> Value {
        let m = self.view();
        let (kind, path) = match self {
            Denoiser::Unet { path, .. } => ("unet", path),
            Denoiser::Oracle { path, .. } => ("gaussian-oracle", path),
        };
        json!({
            "kind": kind,
            "path": path,
            "n": m.predictor.size(),
            "hurst": m.normalization.hurst,
            "T": m.schedule.len(),
        })
    }
}

/// One completed instance.
#[derive(Debug, Clone)]
pub struct Completed {
    pub matrix: DistanceMatrix,
    pub iterations: usize,
    pub loss: f64,
    pub fallback_entries: usize,
    pub matched_index: Option<usize>,
}

pub struct Engine<'a> {
    pub completion: &'a CompletionConfig,
    pub sampler: &'a SamplerConfig,
    pub samples: usize,
    pub database: Option<&'a [DistanceMatrix]>,
    pub denoiser: Option<&'a Denoiser>,
    pub chain: Option<NoiseSchedule>,
}

impl<'a> Engine<'a> {
    pub fn new(
        completion: &'a CompletionConfig,
        sampler: &'a SamplerConfig,
        samples: usize,
        database: Option<&'a [DistanceMatrix]>,
        denoiser: Option<&'a Denoiser>,
    ) -> CliResult<Self> {
        let chain = match denoiser {
            Some(d) => Some(sampler.chain(d.view().schedule)?),
            None => None,
        };
        Ok(Self {
            completion,
            sampler,
            samples,
            database,
            denoiser,
            chain,
        })
    }

    /// Fail early when `method` lacks its database or model.
    pub fn check(&self, method: CliMethod) -> CliResult<()> {
        if method == CliMethod::Db && self.database.is_none() {
            return Err(usage("method db needs --database"));
        }
        if method.inpaint().is_some() && self.denoiser.is_none() {
            return Err(usage(format!("method {} needs --model or --oracle", method.name())));
        }
        Ok(())
    }

    /// Complete every input; instance `k` uses stream `k` of `seed`.
    pub fn run(
        &self,
        method: CliMethod,
        inputs: &[MaskedMatrix],
        seed: u64,
    ) -> CliResult<Vec<edmkit::Result<Completed>>> {
        self.check(method)?;
        let classical = |m: Method| {
            let cfg = CompletionConfig {
                method: m,
                ..self.completion.clone()
            };
            complete_batch(inputs, &cfg, seed)
                .into_iter()
                .map(|r| r.map(Completed::from))
                .collect()
        };
        Ok(match method {
            CliMethod::Fista => classical(Method::Fista),
            CliMethod::Opt => classical(Method::Opt),
            CliMethod::Nn => classical(Method::Nn),
            CliMethod::Db => {
                let db = self.database.expect("checked");
                inputs
                    .par_iter()
                    .map(|pm| db_search_complete(pm, db).map(Completed::from))
                    .collect()
            }
            CliMethod::Mean => match ensemble_mean_complete_all(inputs) {
                Ok(rs) => rs.into_iter().map(|r| Ok(Completed::from(r))).collect(),
                Err(e) => {
                    let no_known = matches!(e, edmkit::Error::NoKnownEntries);
                    let msg = e.to_string();
                    inputs
                        .iter()
                        .map(|_| {
                            Err(if no_known {
                                edmkit::Error::NoKnownEntries
                            } else {
                                edmkit::Error::DegenerateFit(msg.clone())
                            })
                        })
                        .collect()
                }
            },
            other => {
                let m = other.inpaint().expect("diffusion method");
                let model = self.denoiser.expect("checked").view();
                let chain = self.chain.as_ref().expect("chain with model");
                inputs
                    .par_iter()
                    .enumerate()
                    .map(|(k, pm)| {
                        diffusion_complete(pm, m, &model, chain, self.sampler, self.samples, seed, k as u64).map(|c| {
                            Completed {
                                matrix: c.completed,
                                iterations: chain.len(),
                                loss: f64::NAN,
                                fallback_entries: c.fallback_entries,
                                matched_index: None,
                            }
                        })
                    })
                    .collect()
            }
        })
    }
}

impl From<edmkit::complete::CompletionResult> for Completed {
    fn from(r: edmkit::complete::CompletionResult) -> Self {
        Self {
            matrix: r.completed,
            iterations: r.iterations,
            loss: r.final_loss,
            fallback_entries: r.fallback_entries,
            matched_index: r.matched_index,
        }
    }
}
