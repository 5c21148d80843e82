//! Prediction and fit diagnostics: RMSPE, NSME, interval coverage and
//! length, DIC.

use serde::{Deserialize, Serialize};

use crate::model::{compose_y, log_likelihood_level, LatentState, LevelParams, Model};
use crate::sampler::ChainTrace;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmspe: f64,
    pub nsme: f64,
    pub cvg95: f64,
    pub alci95: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dic: Option<f64>,
    pub n_test: usize,
}

fn check(pred: &[f64], obs: &[f64]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::invalid("no observations to evaluate"));
    }
    if pred.len() != obs.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: obs.len(),
            found: pred.len(),
        });
    }
    Ok(())
}

fn sse(pred: &[f64], obs: &[f64]) -> f64 {
    pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum()
}

/// Root mean square prediction error.
pub fn rmspe(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check(pred, obs)?;
    Ok((sse(pred, obs) / obs.len() as f64).sqrt())
}

/// Nash-Sutcliffe efficiency `1 - SSE / SST`.
pub fn nsme(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check(pred, obs)?;
    let m = obs.iter().sum::<f64>() / obs.len() as f64;
    let sst: f64 = obs.iter().map(|o| (o - m) * (o - m)).sum();
    if sst == 0.0 {
        return Err(Error::invalid("observations are constant; efficiency is undefined"));
    }
    Ok(1.0 - sse(pred, obs) / sst)
}

/// Empirical coverage and mean length of the intervals `[lo_i, hi_i]`.
pub fn interval_metrics(lo: &[f64], hi: &[f64], obs: &[f64]) -> Result<(f64, f64)> {
    check(lo, obs)?;
    check(hi, obs)?;
    if let Some(i) = (0..obs.len()).find(|&i| lo[i] > hi[i]) {
        return Err(Error::invalid(format!("interval {i} has lower bound above upper bound")));
    }
    let n = obs.len() as f64;
    let covered = (0..obs.len()).filter(|&i| lo[i] <= obs[i] && obs[i] <= hi[i]).count();
    let len: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).sum();
    Ok((covered as f64 / n, len / n))
}

/// Deviance `-2 sum_t log N(z_t | y_t, tau2_t)` at one parameter and latent
/// value.
pub fn deviance(model: &Model, params: &[LevelParams], w: &[Vec<f64>]) -> f64 {
    let mut state = LatentState {
        w: w.to_vec(),
        y: Vec::new(),
    };
    compose_y(&mut state, params, model);
    -2.0 * (0..model.levels())
        .map(|t| log_likelihood_level(model, &state, params, t))
        .sum::<f64>()
}

/// Component-wise mean of the parameters over the trace.
pub fn posterior_mean_params(trace: &ChainTrace) -> Result<Vec<LevelParams>> {
    let first = trace.draws.first().ok_or(Error::EmptyTrace)?;
    let n = trace.len() as f64;
    let mut mean = first.params.clone();
    for (t, p) in mean.iter_mut().enumerate() {
        let avg = |f: &dyn Fn(&LevelParams) -> f64| trace.draws.iter().map(|d| f(&d.params[t])).sum::<f64>() / n;
        for i in 0..p.beta.len() {
            p.beta[i] = avg(&|q| q.beta[i]);
        }
        for i in 0..p.gamma.len() {
            p.gamma[i] = avg(&|q| q.gamma[i]);
        }
        for i in 0..p.kernel.phi.len() {
            p.kernel.phi[i] = avg(&|q| q.kernel.phi[i]);
        }
        p.kernel.sigma2 = avg(&|q| q.kernel.sigma2);
        p.tau2 = avg(&|q| q.tau2);
    }
    Ok(mean)
}

/// `(pD, DIC)` with `pD = mean D - D(posterior means)` and
/// `DIC = pD + mean D`, conditional on the latent draws.
pub fn dic(model: &Model, trace: &ChainTrace) -> Result<(f64, f64)> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut w_bar: Vec<Vec<f64>> = model.refsets().iter().map(|r| vec![0.0; r.len()]).collect();
    let mut d_sum = 0.0;
    for d in &trace.draws {
        let w = d
            .w
            .as_ref()
            .ok_or_else(|| Error::invalid("trace holds no latent draws"))?;
        d_sum += deviance(model, &d.params, w);
        for (acc, wt) in w_bar.iter_mut().zip(w) {
            for (a, x) in acc.iter_mut().zip(wt) {
                *a += x;
            }
        }
    }
    let n = trace.len() as f64;
    w_bar.iter_mut().flatten().for_each(|x| *x /= n);
    let d_mean = d_sum / n;
    let d_hat = deviance(model, &posterior_mean_params(trace)?, &w_bar);
    let pd = d_mean - d_hat;
    Ok((pd, pd + d_mean))
}
