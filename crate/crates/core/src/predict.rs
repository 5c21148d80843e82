//! Posterior-predictive draws at new locations.
//!
//! For every retained draw the latent value of each level up to the requested
//! one is sampled from its nearest-neighbor conditional given the stored
//! `w~`, the levels are composed through the autoregression and the nugget is
//! added. Targets that coincide with a reference site reuse the stored value.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Location, NeighborIndex, SiteKey};
use crate::model::{dot, Model};
use crate::nngp::conditional_row_at;
use crate::rng::{std_normal, substream};
use crate::sampler::ChainTrace;
use crate::stats::{mean, quantile_sorted, variance};
use crate::{Error, Result};

pub const DEFAULT_QUANTILES: [f64; 2] = [0.025, 0.975];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub targets: Vec<Location>,
    /// Fidelity level of the predicted response, 1-based.
    pub level: usize,
    pub quantiles: Vec<f64>,
    pub seed: u64,
}

impl PredictionRequest {
    pub fn new(targets: Vec<Location>, level: usize) -> Self {
        PredictionRequest {
            targets,
            level,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub mean: f64,
    pub sd: f64,
    /// Aligned with the request's probabilities.
    pub quantiles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub targets: Vec<Location>,
    pub level: usize,
    pub probs: Vec<f64>,
    pub summaries: Vec<TargetSummary>,
    pub draws: usize,
}

/// Per-target predictive samples, one entry per retained draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDraws {
    /// Noise-free `y_t(s)`.
    pub y: Vec<Vec<f64>>,
    /// `z_t(s) = y_t(s) + eps`.
    pub z: Vec<Vec<f64>>,
}

/// Where a target's latent value comes from at one level.
enum Source {
    Stored(usize),
    Neighbors(Vec<usize>),
}

pub fn predictive_draws(
    model: &Model,
    trace: &ChainTrace,
    targets: &[Location],
    level: usize,
    seed: u64,
) -> Result<PredictiveDraws> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if level == 0 || level > model.levels() {
        return Err(Error::invalid(format!(
            "prediction level {level} outside 1..={}",
            model.levels()
        )));
    }
    if trace.draws.iter().any(|d| d.w.is_none()) {
        return Err(Error::invalid("trace holds no latent draws"));
    }
    if let Some(t) = targets.iter().find(|t| t.dim() != model.dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: t.dim(),
        });
    }
    let levels = level;
    let lookups: Vec<HashMap<SiteKey, usize>> = model.refsets()[..levels]
        .iter()
        .map(|r| r.combined().iter().enumerate().map(|(i, l)| (l.key(), i)).collect())
        .collect();
    let indexes: Vec<NeighborIndex> = model.refsets()[..levels]
        .iter()
        .map(|r| NeighborIndex::new(r.combined()))
        .collect();

    let per_target: Vec<(Vec<f64>, Vec<f64>)> = targets
        .par_iter()
        .enumerate()
        .map(|(p, target)| {
            let s = target.coords();
            let sources: Vec<Source> = (0..levels)
                .map(|t| match lookups[t].get(&target.key()) {
                    Some(&i) => Source::Stored(i),
                    None => Source::Neighbors(indexes[t].nearest(s, model.m())),
                })
                .collect();
            let h: Vec<Vec<f64>> = (0..levels).map(|t| model.bases()[t].trend.eval(s)).collect();
            let g: Vec<Vec<f64>> = (0..levels).map(|t| model.bases()[t].scale.eval(s)).collect();
            let mut rng = substream(seed, p as u64);
            let mut cache: Vec<Option<(Vec<f64>, Vec<f64>, f64)>> = vec![None; levels];
            let mut ys = Vec::with_capacity(trace.len());
            let mut zs = Vec::with_capacity(trace.len());
            for draw in &trace.draws {
                let w = draw.w.as_ref().expect("checked above");
                let mut y = 0.0;
                for t in 0..levels {
                    let theta = &draw.params[t];
                    let wt = match &sources[t] {
                        Source::Stored(i) => w[t][*i],
                        Source::Neighbors(nbrs) => {
                            let phi = &theta.kernel.phi;
                            let stale = cache[t].as_ref().is_none_or(|(cphi, _, _)| cphi != phi);
                            if stale {
                                let locs = model.refsets()[t].combined();
                                let (b, f) = conditional_row_at(locs, s, nbrs, phi, p)?;
                                cache[t] = Some((phi.clone(), b, f));
                            }
                            let (_, b, f) = cache[t].as_ref().expect("filled above");
                            let m: f64 = nbrs.iter().zip(b).map(|(&j, b)| b * w[t][j]).sum();
                            m + (theta.kernel.sigma2 * f).sqrt() * std_normal(&mut rng)
                        }
                    };
                    let below = if t == 0 { 0.0 } else { dot(&g[t], &theta.gamma) * y };
                    y = below + dot(&h[t], &theta.beta) + wt;
                }
                let tau2 = draw.params[levels - 1].tau2;
                ys.push(y);
                zs.push(y + tau2.sqrt() * std_normal(&mut rng));
            }
            Ok((ys, zs))
        })
        .collect::<Result<_>>()?;
    let (y, z) = per_target.into_iter().unzip();
    Ok(PredictiveDraws { y, z })
}

pub fn summarize(draws: &[f64], probs: &[f64]) -> TargetSummary {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    TargetSummary {
        mean: mean(draws),
        sd: variance(draws).sqrt(),
        quantiles: probs.iter().map(|&p| quantile_sorted(&sorted, p)).collect(),
    }
}

pub fn predict(model: &Model, trace: &ChainTrace, request: &PredictionRequest) -> Result<PredictionResult> {
    if let Some(p) = request.quantiles.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::invalid(format!("quantile probability {p} outside (0, 1)")));
    }
    let draws = predictive_draws(model, trace, &request.targets, request.level, request.seed)?;
    let summaries = draws.z.iter().map(|z| summarize(z, &request.quantiles)).collect();
    Ok(PredictionResult {
        targets: request.targets.clone(),
        level: request.level,
        probs: request.quantiles.clone(),
        summaries,
        draws: trace.len(),
    })
}

/// Cell centers of a regular grid over `bbox`, first coordinate varying
/// fastest.
pub fn grid_centers(bbox: &[(f64, f64)], cell: &[f64]) -> Result<Vec<Location>> {
    if bbox.is_empty() || bbox.len() != cell.len() {
        return Err(Error::LengthMismatch {
            what: "cell sizes",
            expected: bbox.len(),
            found: cell.len(),
        });
    }
    if bbox.iter().any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::invalid("grid bounding box has zero area"));
    }
    if cell.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::invalid("grid cell sizes must be positive"));
    }
    let counts: Vec<usize> = bbox
        .iter()
        .zip(cell)
        .map(|((lo, hi), c)| (((hi - lo) / c) - 1e-9).ceil().max(1.0) as usize)
        .collect();
    let total: usize = counts.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; counts.len()];
    for _ in 0..total {
        let coords = idx
            .iter()
            .zip(bbox.iter().zip(cell))
            .map(|(&i, ((lo, _), c))| lo + (i as f64 + 0.5) * c)
            .collect();
        out.push(Location::new(coords)?);
        for (k, i) in idx.iter_mut().enumerate() {
            *i += 1;
            if *i < counts[k] {
                break;
            }
            *i = 0;
        }
    }
    Ok(out)
}

pub fn predict_grid(
    model: &Model,
    trace: &ChainTrace,
    bbox: &[(f64, f64)],
    cell: &[f64],
    level: usize,
    seed: u64,
) -> Result<PredictionResult> {
    let targets = grid_centers(bbox, cell)?;
    predict(
        model,
        trace,
        &PredictionRequest {
            targets,
            level,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            seed,
        },
    )
}
