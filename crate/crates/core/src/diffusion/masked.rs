//! Inpainting of partially known distance matrices with a noise predictor.

use nalgebra::DMatrix;

use super::{
    inpaint, postprocess_edm, EpsilonPredictor, InpaintMethod, NoiseSchedule, NormalizationSpec, Observation,
    SamplerConfig,
};
use crate::complete::nn_complete;
use crate::edm::{DistanceMatrix, Mask, MaskedMatrix};
use crate::error::Result;

/// A noise predictor with the schedule and normalization it was trained with.
#[derive(Clone, Copy)]
pub struct DiffusionModel<'a> {
    pub predictor: &'a dyn EpsilonPredictor,
    pub schedule: &'a NoiseSchedule,
    pub normalization: NormalizationSpec,
}

#[derive(Debug, Clone)]
pub struct DiffusionCompletion {
    pub completed: DistanceMatrix,
    /// Unknown pairs outside the model window, filled by nearest neighbor.
    pub fallback_entries: usize,
    /// `(offset, size)` of the model window when the sizes differ.
    pub window: Option<(usize, usize)>,
}

/// Block of `pm` seen by a model of size `m`: centered crop when `n > m`,
/// centered zero padding (fully unknown) when `n < m`.
fn model_block(pm: &MaskedMatrix, m: usize) -> Result<(MaskedMatrix, usize)> {
    let n = pm.n();
    if n >= m {
        let off = (n - m) / 2;
        let d = DMatrix::from_fn(m, m, |i, j| pm.values().get(i + off, j + off));
        let mask = Mask::from_fn(m, |i, j| pm.mask().is_known(i + off, j + off));
        Ok((MaskedMatrix::new(&DistanceMatrix::new(d, pm.is_squared())?, mask)?, off))
    } else {
        let off = (m - n) / 2;
        let inside = |i: usize| i >= off && i < off + n;
        let d = DMatrix::from_fn(m, m, |i, j| {
            if inside(i) && inside(j) {
                pm.values().get(i - off, j - off)
            } else {
                0.0
            }
        });
        let mask = Mask::from_fn(m, |i, j| inside(i) && inside(j) && pm.mask().is_known(i - off, j - off));
        Ok((MaskedMatrix::new(&DistanceMatrix::new(d, pm.is_squared())?, mask)?, off))
    }
}

/// Inpaint `pm` with the mean of `samples` posterior draws (chains
/// `index·samples + r` of `seed`) over the subsampled `chain`.
///
/// Known entries are kept exactly. A matrix larger than the model is
/// completed on its centered model-size window, the rest by nearest neighbor.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_complete(
    pm: &MaskedMatrix,
    method: InpaintMethod,
    model: &DiffusionModel,
    chain: &NoiseSchedule,
    sampler: &SamplerConfig,
    samples: usize,
    seed: u64,
    index: u64,
) -> Result<DiffusionCompletion> {
    let n = pm.n();
    let m = model.predictor.size();
    let (block, off) = model_block(pm, m)?;
    let y = Observation::from_masked(&block, &model.normalization, true)?;
    let draws = samples.max(1);
    let mut mean = vec![0.0; m * m];
    for r in 0..draws as u64 {
        let raw = inpaint(
            method,
            model.predictor,
            chain,
            &y,
            sampler,
            seed,
            index * draws as u64 + r,
        )?;
        for (acc, v) in mean.iter_mut().zip(&raw) {
            *acc += v / draws as f64;
        }
    }
    let (sample, _) = postprocess_edm(&mean, &model.normalization)?;
    let mut fallback = 0;
    let mut a = if n > m {
        nn_complete(pm)?.completed.into_matrix()
    } else {
        DMatrix::zeros(n, n)
    };
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let from_model = if n >= m {
                (i >= off && i < off + m && j >= off && j < off + m).then(|| sample.get(i - off, j - off))
            } else {
                Some(sample.get(i + off, j + off))
            };
            match (pm.known(i, j), from_model) {
                (Some(v), _) => a[(i, j)] = v,
                (None, Some(v)) => a[(i, j)] = v,
                (None, None) => fallback += 1,
            }
        }
    }
    Ok(DiffusionCompletion {
        completed: DistanceMatrix::new(a, true)?,
        fallback_entries: fallback / 2,
        window: (n != m).then_some((off, m)),
    })
}
