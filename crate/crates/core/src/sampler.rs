//! Gibbs sampler with a Metropolis-Hastings step for the ranges.
//!
//! Each level is updated in turn: latent interpolants `w*`, latent field `w`,
//! an optional trend translation move, `beta`, `gamma`, `tau2`, `sigma2`,
//! `phi` and a joint `(sigma2, phi)` move in whitened coordinates. Under [`Scheme::Exact`] every conditional is taken from the joint
//! posterior, so a latent value also sees the sites that condition on it and
//! the observations it reaches at higher levels through the autoregression.
//! [`Scheme::Published`] restricts each conditional to its own level and
//! neighbor factor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::KernelParams;
use crate::model::{compose_y, dot, gaussian_loglik, log_joint_with, LatentState, LevelParams, Model, Priors};
use crate::nngp::{nngp_log_density, quad_form_tilde, NngpFactors};
use crate::rng::{inv_gamma, std_normal, substream, ChainRng};
use crate::{Error, Result};

const TARGET_ACCEPTANCE: f64 = 0.35;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Full conditionals of the joint posterior.
    #[default]
    Exact,
    /// Level-local conditionals without child or cross-level terms.
    Published,
}

/// Blocks updated by a sweep; the rest stay at their current values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateMask {
    pub w_star: bool,
    pub w: bool,
    pub shift: bool,
    pub beta: bool,
    pub gamma: bool,
    pub tau2: bool,
    pub sigma2: bool,
    pub phi: bool,
    /// Joint `(sigma2, phi)` move in whitened coordinates (exact scheme only).
    pub whitened: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        UpdateMask {
            w_star: true,
            w: true,
            shift: true,
            beta: true,
            gamma: true,
            tau2: true,
            sigma2: true,
            phi: true,
            whitened: true,
        }
    }
}

impl UpdateMask {
    /// Only the latent fields move; parameters stay fixed.
    pub fn latent_only() -> Self {
        UpdateMask {
            w_star: true,
            w: true,
            shift: false,
            beta: false,
            gamma: false,
            tau2: false,
            sigma2: false,
            phi: false,
            whitened: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial random-walk step on each `log phi` component.
    pub mh_step: f64,
    /// Adapt the step toward 35% acceptance during burn-in.
    pub adapt: bool,
    pub seed: u64,
    pub scheme: Scheme,
    pub shift_move: bool,
    /// Keep `w~` with every retained draw (needed for prediction).
    pub store_latent: bool,
    /// Report progress every this many iterations; 0 disables.
    pub report_every: usize,
    pub mask: UpdateMask,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iter: 35_000,
            burn_in: 5_000,
            thin: 1,
            mh_step: 0.3,
            adapt: true,
            seed: 1,
            scheme: Scheme::Exact,
            shift_move: true,
            store_latent: true,
            report_every: 0,
            mask: UpdateMask::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::invalid(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if !(self.mh_step > 0.0 && self.mh_step.is_finite()) {
            return Err(Error::invalid("mh_step must be positive"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    fn keeps(&self, iter: usize) -> bool {
        iter >= self.burn_in && (iter - self.burn_in + 1).is_multiple_of(self.thin)
    }
}

/// One retained iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iter: usize,
    pub params: Vec<LevelParams>,
    pub w: Option<Vec<Vec<f64>>>,
}

/// Metropolis-Hastings bookkeeping for one level's `phi` block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub proposed: usize,
    pub accepted: usize,
    /// Counts after burn-in only.
    pub proposed_kept: usize,
    pub accepted_kept: usize,
    pub step: f64,
}

impl Acceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn kept_rate(&self) -> f64 {
        if self.proposed_kept == 0 {
            0.0
        } else {
            self.accepted_kept as f64 / self.proposed_kept as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub draws: Vec<Draw>,
    pub acceptance: Vec<Acceptance>,
    /// Bookkeeping of the whitened `(sigma2, phi)` move.
    #[serde(default)]
    pub whitened: Vec<Acceptance>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Snapshot passed to the progress hook.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub iter: usize,
    pub log_joint: f64,
    pub acceptance: Vec<f64>,
}

/// Chain state plus the structures needed to update it.
pub struct Sampler<'a> {
    model: &'a Model,
    priors: &'a Priors,
    config: SamplerConfig,
    params: Vec<LevelParams>,
    state: LatentState,
    factors: Vec<NngpFactors>,
    z: Vec<Vec<f64>>,
    acceptance: Vec<Acceptance>,
    whitened: Vec<Acceptance>,
    rngs: Vec<ChainRng>,
    iter: usize,
}

impl<'a> Sampler<'a> {
    /// Starts from the prior-based initial values with `w = 0`.
    pub fn new(model: &'a Model, priors: &'a Priors, config: SamplerConfig) -> Result<Self> {
        Self::with_state(model, priors, config, priors.initial_params(), None)
    }

    pub fn with_state(
        model: &'a Model,
        priors: &'a Priors,
        config: SamplerConfig,
        params: Vec<LevelParams>,
        w: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        config.validate()?;
        model.validate_priors(priors)?;
        model.validate_params(&params)?;
        let mut state = model.zero_state(&params);
        if let Some(w) = w {
            for (t, wt) in w.iter().enumerate() {
                if wt.len() != model.refsets()[t].len() {
                    return Err(Error::LengthMismatch {
                        what: "latent vector",
                        expected: model.refsets()[t].len(),
                        found: wt.len(),
                    });
                }
            }
            state.w = w;
            crate::model::compose_y(&mut state, &params, model);
        }
        let factors = model.factors(&params)?;
        let t_max = model.levels();
        let acceptance = vec![
            Acceptance {
                step: config.mh_step,
                ..Acceptance::default()
            };
            t_max
        ];
        let rngs = (0..t_max).map(|t| substream(config.seed, t as u64 + 1)).collect();
        let z = model.datasets().iter().map(|d| d.values().to_vec()).collect();
        Ok(Sampler {
            model,
            priors,
            config,
            params,
            state,
            factors,
            z,
            whitened: acceptance.clone(),
            acceptance,
            rngs,
            iter: 0,
        })
    }

    pub fn params(&self) -> &[LevelParams] {
        &self.params
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn factors(&self) -> &[NngpFactors] {
        &self.factors
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.z
    }

    pub fn acceptance(&self) -> &[Acceptance] {
        &self.acceptance
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Replaces the responses of level `t` (0-based) used by the updates.
    pub fn set_data(&mut self, t: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.z[t].len() {
            return Err(Error::LengthMismatch {
                what: "values",
                expected: self.z[t].len(),
                found: values.len(),
            });
        }
        self.z[t] = values;
        Ok(())
    }

    /// Replaces all parameters and the latent field; recomputes `y` and the
    /// factors.
    pub fn set_state(&mut self, params: Vec<LevelParams>, w: Vec<Vec<f64>>) -> Result<()> {
        self.model.validate_params(&params)?;
        self.factors = self.model.factors(&params)?;
        self.params = params;
        self.state.w = w;
        crate::model::compose_y(&mut self.state, &self.params, self.model);
        Ok(())
    }

    pub fn log_joint(&self) -> Result<f64> {
        log_joint_with(self.model, &self.state, &self.params, self.priors, &self.factors, &self.z)
    }

    fn exact(&self) -> bool {
        self.config.scheme == Scheme::Exact
    }

    /// Calls `f(level, index, c, own)` along the upward chain of site `k` of
    /// `S~_t`; `c` is the coefficient of `w_t(k)` in `y_level`. The published
    /// scheme only visits level `t`.
    fn walk<F: FnMut(usize, usize, f64, bool)>(&self, t: usize, k: usize, mut f: F) {
        let mut c = 1.0;
        for (n, &(l, j)) in self.model.chain(t, k).iter().enumerate() {
            if n > 0 {
                if !self.exact() {
                    return;
                }
                c *= self.model.zeta(l, j, &self.params);
            }
            f(l, j, c, self.model.refsets()[l].is_own(j));
        }
    }

    /// Adds `delta` to `y_t(k)` and propagates it to every higher level.
    fn shift_y(&mut self, t: usize, k: usize, delta: f64) {
        let mut c = 1.0;
        for (n, &(l, j)) in self.model.chain(t, k).iter().enumerate() {
            if n > 0 {
                c *= self.model.zeta(l, j, &self.params);
            }
            self.state.y[l][j] += c * delta;
        }
    }

    /// Conditional mean and variance of `w_t(k)` given everything else.
    pub fn w_conditional(&self, t: usize, k: usize) -> (f64, f64) {
        let g = &self.model.graphs()[t];
        let f = &self.factors[t];
        let w = &self.state.w[t];
        let fk = f.f(k);
        let mut prec = 1.0 / fk;
        let mut lin = f.cond_mean(g, k, w) / fk;
        if self.exact() {
            for &(i, pos) in g.children(k) {
                let b = f.b(i)[pos];
                let fi = f.f(i);
                let r = w[i] - f.cond_mean(g, i, w) + b * w[k];
                prec += b * b / fi;
                lin += b * r / fi;
            }
        }
        let wk = w[k];
        self.walk(t, k, |l, j, c, own| {
            if own {
                let tau2 = self.params[l].tau2;
                prec += c * c / tau2;
                lin += c * (self.z[l][j] - self.state.y[l][j] + c * wk) / tau2;
            }
        });
        (lin / prec, 1.0 / prec)
    }

    fn update_site(&mut self, t: usize, k: usize) {
        let (mean, var) = self.w_conditional(t, k);
        let new = mean + var.sqrt() * std_normal(&mut self.rngs[t]);
        let delta = new - self.state.w[t][k];
        self.state.w[t][k] = new;
        self.shift_y(t, k, delta);
    }

    /// Redraws the latent interpolants `w_t*` in graph order.
    pub fn update_w_star(&mut self, t: usize) {
        let n_own = self.model.refsets()[t].n_own();
        let model = self.model;
        for &k in &model.graphs()[t].order()[n_own..] {
            self.update_site(t, k);
        }
    }

    /// Redraws `w_t` at the observed sites in graph order.
    pub fn update_w(&mut self, t: usize) {
        let n_own = self.model.refsets()[t].n_own();
        let model = self.model;
        for &k in &model.graphs()[t].order()[..n_own] {
            self.update_site(t, k);
        }
    }

    /// Posterior precision and linear term for coefficients entering
    /// `y_t(k)` through `design(k)' coef`.
    fn regression(
        &self,
        t: usize,
        design: &dyn Fn(usize) -> Vec<f64>,
        coef: &[f64],
        prior_mean: &[f64],
        prior_var: &[f64],
    ) -> (DMatrix<f64>, DVector<f64>) {
        let p = coef.len();
        let mut prec = DMatrix::from_diagonal(&DVector::from_iterator(p, prior_var.iter().map(|v| 1.0 / v)));
        let mut lin = DVector::from_iterator(p, prior_mean.iter().zip(prior_var).map(|(m, v)| m / v));
        for k in 0..self.model.refsets()[t].len() {
            let x0 = design(k);
            let base = dot(&x0, coef);
            self.walk(t, k, |l, j, c, own| {
                if !own {
                    return;
                }
                let tau2 = self.params[l].tau2;
                let r = self.z[l][j] - self.state.y[l][j] + c * base;
                for a in 0..p {
                    let xa = c * x0[a];
                    lin[a] += xa * r / tau2;
                    for b in 0..=a {
                        prec[(a, b)] += xa * c * x0[b] / tau2;
                    }
                }
            });
        }
        for a in 0..p {
            for b in 0..a {
                prec[(b, a)] = prec[(a, b)];
            }
        }
        (prec, lin)
    }

    fn gaussian_from_precision(prec: DMatrix<f64>, lin: DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chol = prec
            .cholesky()
            .ok_or_else(|| Error::Factorization("conditional precision is singular".into()))?;
        let mean = chol.solve(&lin);
        Ok((mean, chol.inverse()))
    }

    fn draw_from_precision(&mut self, t: usize, prec: DMatrix<f64>, lin: DVector<f64>) -> Result<DVector<f64>> {
        let chol = prec
            .cholesky()
            .ok_or_else(|| Error::Factorization("conditional precision is singular".into()))?;
        let mean = chol.solve(&lin);
        let eps = DVector::from_fn(mean.len(), |_, _| std_normal(&mut self.rngs[t]));
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or_else(|| Error::Factorization("triangular solve failed".into()))?;
        Ok(mean + dev)
    }

    fn beta_system(&self, t: usize) -> (DMatrix<f64>, DVector<f64>) {
        let model = self.model;
        let pr = &self.priors.levels[t];
        self.regression(
            t,
            &|k| model.trend_at(t, k).to_vec(),
            &self.params[t].beta,
            &pr.beta_mean,
            &pr.beta_var,
        )
    }

    fn gamma_system(&self, t: usize) -> (DMatrix<f64>, DVector<f64>) {
        let model = self.model;
        let y_below = &self.state.y[t - 1];
        let parent = model.refsets()[t].parent();
        let pr = &self.priors.levels[t];
        self.regression(
            t,
            &|k| {
                let y = y_below[parent[k]];
                model.scale_at(t, k).iter().map(|g| g * y).collect()
            },
            &self.params[t].gamma,
            &pr.gamma_mean,
            &pr.gamma_var,
        )
    }

    /// Conditional mean and covariance of `beta_t`.
    pub fn beta_conditional(&self, t: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (p, l) = self.beta_system(t);
        Self::gaussian_from_precision(p, l)
    }

    /// Conditional mean and covariance of `gamma_{t-1}` (`t >= 1`, 0-based).
    pub fn gamma_conditional(&self, t: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (p, l) = self.gamma_system(t);
        Self::gaussian_from_precision(p, l)
    }

    pub fn update_beta(&mut self, t: usize) -> Result<()> {
        let (p, l) = self.beta_system(t);
        let new = self.draw_from_precision(t, p, l)?;
        let old = std::mem::replace(&mut self.params[t].beta, new.as_slice().to_vec());
        let diff: Vec<f64> = new.iter().zip(&old).map(|(a, b)| a - b).collect();
        for k in 0..self.model.refsets()[t].len() {
            let delta = dot(self.model.trend_at(t, k), &diff);
            self.shift_y(t, k, delta);
        }
        Ok(())
    }

    pub fn update_gamma(&mut self, t: usize) -> Result<()> {
        let (p, l) = self.gamma_system(t);
        let new = self.draw_from_precision(t, p, l)?;
        let old = std::mem::replace(&mut self.params[t].gamma, new.as_slice().to_vec());
        let diff: Vec<f64> = new.iter().zip(&old).map(|(a, b)| a - b).collect();
        let parent = self.model.refsets()[t].parent();
        for k in 0..self.model.refsets()[t].len() {
            let delta = dot(self.model.scale_at(t, k), &diff) * self.state.y[t - 1][parent[k]];
            self.shift_y(t, k, delta);
        }
        Ok(())
    }

    /// Conditional of the translation `c` in `beta_t + c`, `w~_t - H~_t c`.
    pub fn shift_conditional(&self, t: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (p, l) = self.shift_system(t);
        Self::gaussian_from_precision(p, l)
    }

    fn shift_system(&self, t: usize) -> (DMatrix<f64>, DVector<f64>) {
        let g = &self.model.graphs()[t];
        let f = &self.factors[t];
        let w = &self.state.w[t];
        let pr = &self.priors.levels[t];
        let beta = &self.params[t].beta;
        let p = beta.len();
        let mut prec = DMatrix::from_diagonal(&DVector::from_iterator(p, pr.beta_var.iter().map(|v| 1.0 / v)));
        let mut lin = DVector::from_iterator(
            p,
            (0..p).map(|a| (pr.beta_mean[a] - beta[a]) / pr.beta_var[a]),
        );
        for i in 0..g.len() {
            let mut gi = self.model.trend_at(t, i).to_vec();
            for (&j, b) in g.neighbors(i).iter().zip(f.b(i)) {
                for (x, h) in gi.iter_mut().zip(self.model.trend_at(t, j)) {
                    *x -= b * h;
                }
            }
            let u = w[i] - f.cond_mean(g, i, w);
            let fi = f.f(i);
            for a in 0..p {
                lin[a] += gi[a] * u / fi;
                for b in 0..p {
                    prec[(a, b)] += gi[a] * gi[b] / fi;
                }
            }
        }
        (prec, lin)
    }

    pub fn update_shift(&mut self, t: usize) -> Result<()> {
        let (p, l) = self.shift_system(t);
        let c = self.draw_from_precision(t, p, l)?;
        for (b, ci) in self.params[t].beta.iter_mut().zip(c.iter()) {
            *b += ci;
        }
        for k in 0..self.state.w[t].len() {
            self.state.w[t][k] -= dot(self.model.trend_at(t, k), c.as_slice());
        }
        Ok(())
    }

    /// `(shape, rate)` of the inverse-gamma conditional of `sigma2_t`.
    pub fn sigma2_conditional(&self, t: usize) -> Result<(f64, f64)> {
        let pr = &self.priors.levels[t];
        let q = quad_form_tilde(&self.state.w[t], &self.factors[t], &self.model.graphs()[t])?;
        let n = self.state.w[t].len() as f64;
        Ok((pr.sigma2_shape + 0.5 * n, pr.sigma2_rate + 0.5 * q))
    }

    /// `(shape, rate)` of the inverse-gamma conditional of `tau2_t`.
    pub fn tau2_conditional(&self, t: usize) -> (f64, f64) {
        let pr = &self.priors.levels[t];
        let sse: f64 = self.z[t]
            .iter()
            .zip(&self.state.y[t])
            .map(|(z, y)| (z - y) * (z - y))
            .sum();
        (pr.tau2_shape + 0.5 * self.z[t].len() as f64, pr.tau2_rate + 0.5 * sse)
    }

    pub fn update_sigma2(&mut self, t: usize) -> Result<()> {
        let (a, b) = self.sigma2_conditional(t)?;
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::NonFiniteTerm(format!("sigma2 rate {b} at level {}", t + 1)));
        }
        let s = inv_gamma(&mut self.rngs[t], a, b);
        self.params[t].kernel.sigma2 = s;
        self.factors[t].rescale(s);
        Ok(())
    }

    pub fn update_tau2(&mut self, t: usize) -> Result<()> {
        let (a, b) = self.tau2_conditional(t);
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::NonFiniteTerm(format!("tau2 rate {b} at level {}", t + 1)));
        }
        self.params[t].tau2 = inv_gamma(&mut self.rngs[t], a, b);
        Ok(())
    }

    /// Log target of `phi_t` on the original scale (up to a constant).
    pub fn phi_log_target(&self, t: usize, phi: &[f64]) -> f64 {
        let upper = &self.priors.levels[t].phi_upper;
        if phi.iter().zip(upper).any(|(p, l)| *p <= 0.0 || p >= l) {
            return f64::NEG_INFINITY;
        }
        let kernel = KernelParams {
            sigma2: self.params[t].kernel.sigma2,
            phi: phi.to_vec(),
        };
        let g = &self.model.graphs()[t];
        match NngpFactors::compute(g, self.model.refsets()[t].combined(), &kernel) {
            Ok(f) => nngp_log_density(&self.state.w[t], &f, g).unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// One random-walk proposal on `log phi_t`. Returns whether it was accepted.
    pub fn update_phi(&mut self, t: usize) -> Result<bool> {
        let step = self.acceptance[t].step;
        let cur = self.params[t].kernel.phi.clone();
        let prop: Vec<f64> = cur
            .iter()
            .map(|p| p * (step * std_normal(&mut self.rngs[t])).exp())
            .collect();
        let u: f64 = self.rngs[t].random();
        let upper = &self.priors.levels[t].phi_upper;
        let mut accepted = false;
        if prop.iter().zip(upper).all(|(p, l)| p < l) {
            let kernel = KernelParams {
                sigma2: self.params[t].kernel.sigma2,
                phi: prop.clone(),
            };
            let g = &self.model.graphs()[t];
            if let Ok(f) = NngpFactors::compute(g, self.model.refsets()[t].combined(), &kernel) {
                let new = nngp_log_density(&self.state.w[t], &f, g)?;
                let old = nngp_log_density(&self.state.w[t], &self.factors[t], g)?;
                let jac: f64 = prop.iter().map(|p| p.ln()).sum::<f64>()
                    - cur.iter().map(|p| p.ln()).sum::<f64>();
                let log_alpha = new - old + jac;
                if log_alpha.is_finite() && u.ln() < log_alpha {
                    self.params[t].kernel.phi = prop;
                    self.factors[t] = f;
                    accepted = true;
                }
            }
        }
        record(&mut self.acceptance[t], accepted, self.iter, &self.config);
        Ok(accepted)
    }

    /// Random-walk proposal on `(log sigma2_t, log phi_t)` that holds the
    /// whitened innovations `(w_i - b_i' w_N(i)) / sqrt(f_i)` fixed and
    /// rebuilds `w~_t` from them, so the field roughens or smooths with the
    /// range instead of pinning it. The prior of `w~_t` cancels in these
    /// coordinates and only the likelihood of the levels reached by `w~_t`
    /// enters the ratio.
    pub fn update_whitened(&mut self, t: usize) -> Result<bool> {
        let step = self.whitened[t].step;
        let cur = self.params[t].kernel.clone();
        let rng = &mut self.rngs[t];
        let sigma2 = cur.sigma2 * (step * std_normal(rng)).exp();
        let phi: Vec<f64> = cur.phi.iter().map(|p| p * (step * std_normal(rng)).exp()).collect();
        let u: f64 = rng.random();
        let pr = &self.priors.levels[t];
        let mut accepted = false;
        if phi.iter().zip(&pr.phi_upper).all(|(p, l)| p < l) {
            let kernel = KernelParams { sigma2, phi };
            let g = &self.model.graphs()[t];
            if let Ok(f) = NngpFactors::compute(g, self.model.refsets()[t].combined(), &kernel) {
                let (old, w) = (&self.factors[t], &self.state.w[t]);
                let mut fresh = vec![0.0; w.len()];
                for &i in g.order() {
                    let e = (w[i] - old.cond_mean(g, i, w)) / old.f(i).sqrt();
                    fresh[i] = f.cond_mean(g, i, &fresh) + f.f(i).sqrt() * e;
                }
                let mut params = self.params.clone();
                params[t].kernel = kernel.clone();
                let mut state = LatentState {
                    w: self.state.w.clone(),
                    y: Vec::new(),
                };
                state.w[t] = fresh;
                compose_y(&mut state, &params, self.model);
                let loglik = |s: &LatentState| -> f64 {
                    (t..self.model.levels())
                        .map(|l| gaussian_loglik(&self.z[l], &s.y[l], params[l].tau2))
                        .sum()
                };
                let ig = |x: f64| -(pr.sigma2_shape + 1.0) * x.ln() - pr.sigma2_rate / x;
                let log_scale = |k: &KernelParams| k.sigma2.ln() + k.phi.iter().map(|p| p.ln()).sum::<f64>();
                let log_alpha = loglik(&state) - loglik(&self.state) + ig(kernel.sigma2) - ig(cur.sigma2)
                    + log_scale(&kernel)
                    - log_scale(&cur);
                if log_alpha.is_finite() && u.ln() < log_alpha {
                    self.params = params;
                    self.state = state;
                    self.factors[t] = f;
                    accepted = true;
                }
            }
        }
        record(&mut self.whitened[t], accepted, self.iter, &self.config);
        Ok(accepted)
    }

    /// One full sweep over all levels.
    pub fn sweep(&mut self) -> Result<()> {
        let mask = self.config.mask;
        for t in 0..self.model.levels() {
            if mask.w_star {
                self.update_w_star(t);
            }
            if mask.w {
                self.update_w(t);
            }
            if mask.shift && self.config.shift_move {
                self.update_shift(t)?;
            }
            if mask.beta {
                self.update_beta(t)?;
            }
            if t > 0 && mask.gamma {
                self.update_gamma(t)?;
            }
            if mask.tau2 {
                self.update_tau2(t)?;
            }
            if mask.sigma2 {
                self.update_sigma2(t)?;
            }
            if mask.phi {
                self.update_phi(t)?;
            }
            if mask.whitened && self.exact() {
                self.update_whitened(t)?;
            }
        }
        self.iter += 1;
        Ok(())
    }

    /// Runs the configured number of iterations from the current state.
    pub fn run(&mut self, mut progress: Option<&mut dyn FnMut(&Progress)>) -> Result<ChainTrace> {
        let mut draws = Vec::with_capacity(self.config.retained());
        let every = self.config.report_every;
        while self.iter < self.config.n_iter {
            let iter = self.iter;
            self.sweep().map_err(|e| Error::Iteration {
                iter,
                source: Box::new(e),
            })?;
            if self.config.keeps(iter) {
                draws.push(Draw {
                    iter,
                    params: self.params.clone(),
                    w: self.config.store_latent.then(|| self.state.w.clone()),
                });
            }
            if let Some(hook) = progress.as_deref_mut() {
                if every > 0 && (iter + 1).is_multiple_of(every) {
                    hook(&Progress {
                        iter: iter + 1,
                        log_joint: self.log_joint().unwrap_or(f64::NAN),
                        acceptance: self.acceptance.iter().map(Acceptance::rate).collect(),
                    });
                }
            }
        }
        Ok(ChainTrace {
            draws,
            acceptance: self.acceptance.clone(),
            whitened: self.whitened.clone(),
        })
    }
}

/// Counts one proposal and, during burn-in, nudges the step toward the
/// target acceptance rate.
fn record(acc: &mut Acceptance, accepted: bool, iter: usize, config: &SamplerConfig) {
    acc.proposed += 1;
    acc.accepted += accepted as usize;
    if iter >= config.burn_in {
        acc.proposed_kept += 1;
        acc.accepted_kept += accepted as usize;
    } else if config.adapt {
        let gain = (iter as f64 + 1.0).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        acc.step = (acc.step.ln() + gain * (a - TARGET_ACCEPTANCE)).exp();
    }
}

/// Builds a sampler from the prior-based initial state and runs it.
pub fn run_chain(model: &Model, priors: &Priors, config: &SamplerConfig) -> Result<ChainTrace> {
    Sampler::new(model, priors, config.clone())?.run(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FidelityDataset, Location};
    use crate::model::{BasisSpec, PriorSpec};
    use crate::rng::substream;

    fn dataset(level: usize, n: usize, seed: u64) -> FidelityDataset {
        let mut rng = substream(seed, 0);
        let locs = (0..n)
            .map(|_| Location::new(vec![rng.random(), rng.random()]).unwrap())
            .collect();
        let z = (0..n).map(|_| 1.0 + std_normal(&mut rng)).collect();
        FidelityDataset::new(level, locs, z).unwrap()
    }

    fn small() -> (Model, Priors) {
        let model = Model::new(vec![dataset(1, 12, 1), dataset(2, 8, 2)], 4, &[]).unwrap();
        let priors = PriorSpec {
            phi_upper: 1.0,
            ..PriorSpec::default()
        }
        .expand(&[BasisSpec::default(); 2], 2)
        .unwrap();
        (model, priors)
    }

    fn cfg(n_iter: usize, burn_in: usize, thin: usize) -> SamplerConfig {
        SamplerConfig {
            n_iter,
            burn_in,
            thin,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 10, 1).validate().is_err());
        assert!(cfg(10, 0, 0).validate().is_err());
        assert_eq!(cfg(10, 3, 2).retained(), 3);
    }

    #[test]
    fn single_iteration_trace() {
        let (model, priors) = small();
        let trace = run_chain(&model, &priors, &cfg(1, 0, 1)).unwrap();
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn retained_count_and_determinism() {
        let (model, priors) = small();
        let c = cfg(25, 4, 3);
        let a = run_chain(&model, &priors, &c).unwrap();
        let b = run_chain(&model, &priors, &c).unwrap();
        assert_eq!(a.len(), c.retained());
        assert_eq!(a, b);
        let other = run_chain(&model, &priors, &SamplerConfig { seed: 9, ..c }).unwrap();
        assert_ne!(a.draws.last(), other.draws.last());
    }

    #[test]
    fn y_stays_consistent_with_w_and_params() {
        let (model, priors) = small();
        let mut s = Sampler::new(&model, &priors, cfg(50, 10, 1)).unwrap();
        for _ in 0..20 {
            s.sweep().unwrap();
        }
        let mut fresh = s.state().clone();
        crate::model::compose_y(&mut fresh, s.params(), &model);
        for (a, b) in fresh.y.iter().flatten().zip(s.state().y.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_proposal_is_accepted() {
        let (model, priors) = small();
        let s = Sampler::new(&model, &priors, cfg(10, 0, 1)).unwrap();
        let phi = s.params()[0].kernel.phi.clone();
        let lp = s.phi_log_target(0, &phi);
        assert!(lp.is_finite());
        // Log acceptance of an identical proposal is zero.
        assert_eq!(lp - lp, 0.0);
        assert_eq!(s.phi_log_target(0, &[2.0, 0.1]), f64::NEG_INFINITY);
    }

    #[test]
    fn zero_field_sigma2_conditional() {
        let (model, priors) = small();
        let s = Sampler::new(&model, &priors, cfg(10, 0, 1)).unwrap();
        let (a, b) = s.sigma2_conditional(0).unwrap();
        let n = model.refsets()[0].len() as f64;
        assert_eq!((a, b), (2.0 + 0.5 * n, 1.0));
    }

    #[test]
    fn flat_prior_beta_is_residual_mean() {
        let model = Model::new(vec![dataset(1, 10, 3)], 3, &[]).unwrap();
        let priors = PriorSpec {
            beta_var: 1e300,
            phi_upper: 1.0,
            ..PriorSpec::default()
        }
        .expand(model.bases(), 2)
        .unwrap();
        let s = Sampler::new(&model, &priors, cfg(10, 0, 1)).unwrap();
        let (m, v) = s.beta_conditional(0).unwrap();
        let z = model.datasets()[0].values();
        let mean = z.iter().sum::<f64>() / 10.0;
        let tau2 = s.params()[0].tau2;
        assert!((m[0] - mean).abs() < 1e-10);
        assert!((v[(0, 0)] - tau2 / 10.0).abs() < 1e-10);
    }

    #[test]
    fn tiny_prior_variance_collapses_beta() {
        let model = Model::new(vec![dataset(1, 10, 3)], 3, &[]).unwrap();
        let priors = PriorSpec {
            beta_mean: 2.5,
            beta_var: 1e-14,
            phi_upper: 1.0,
            ..PriorSpec::default()
        }
        .expand(model.bases(), 2)
        .unwrap();
        let s = Sampler::new(&model, &priors, cfg(10, 0, 1)).unwrap();
        let (m, _) = s.beta_conditional(0).unwrap();
        assert!((m[0] - 2.5).abs() < 1e-9);
    }

    #[test]
    fn gamma_without_information_is_prior() {
        let (model, priors) = small();
        let mut params = priors.initial_params();
        params[0].beta = vec![0.0];
        let s = Sampler::with_state(&model, &priors, cfg(10, 0, 1), params, None).unwrap();
        let (m, v) = s.gamma_conditional(1).unwrap();
        assert!((m[0] - priors.levels[1].gamma_mean[0]).abs() < 1e-12);
        assert!((v[(0, 0)] - priors.levels[1].gamma_var[0]).abs() < 1e-6);
    }

    #[test]
    fn data_dominates_w_when_noise_vanishes() {
        let model = Model::new(vec![dataset(1, 6, 4)], 3, &[]).unwrap();
        let priors = PriorSpec {
            phi_upper: 1.0,
            ..PriorSpec::default()
        }
        .expand(model.bases(), 2)
        .unwrap();
        let mut params = priors.initial_params();
        params[0].beta = vec![0.0];
        params[0].tau2 = 1e-12;
        let s = Sampler::with_state(&model, &priors, cfg(10, 0, 1), params, None).unwrap();
        let z = model.datasets()[0].values();
        for k in 0..6 {
            let (m, v) = s.w_conditional(0, k);
            assert!((m - z[k]).abs() < 1e-6);
            assert!(v < 1e-11);
        }
    }

    #[test]
    fn huge_noise_leaves_prior_conditional() {
        let model = Model::new(vec![dataset(1, 6, 4)], 3, &[]).unwrap();
        let priors = PriorSpec {
            phi_upper: 1.0,
            ..PriorSpec::default()
        }
        .expand(model.bases(), 2)
        .unwrap();
        let mut params = priors.initial_params();
        params[0].tau2 = 1e300;
        let w0: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let s = Sampler::with_state(
            &model,
            &priors,
            SamplerConfig {
                scheme: Scheme::Published,
                ..cfg(10, 0, 1)
            },
            params,
            Some(vec![w0.clone()]),
        )
        .unwrap();
        let g = &model.graphs()[0];
        let f = &s.factors()[0];
        for k in 0..6 {
            let (m, v) = s.w_conditional(0, k);
            assert!((m - f.cond_mean(g, k, &w0)).abs() < 1e-12);
            assert!((v - f.f(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_move_preserves_y() {
        let (model, priors) = small();
        let mut s = Sampler::new(&model, &priors, cfg(10, 0, 1)).unwrap();
        for _ in 0..3 {
            s.sweep().unwrap();
        }
        let before = s.state().y.clone();
        s.update_shift(0).unwrap();
        for (a, b) in before.iter().flatten().zip(s.state().y.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn whitened_move_keeps_innovations() {
        let (model, priors) = small();
        let mut s = Sampler::new(&model, &priors, cfg(10, 0, 1)).unwrap();
        for _ in 0..3 {
            s.sweep().unwrap();
        }
        let g = &model.graphs()[0];
        let innovations = |s: &Sampler| -> Vec<f64> {
            let (f, w) = (&s.factors()[0], &s.state().w[0]);
            (0..w.len()).map(|i| (w[i] - f.cond_mean(g, i, w)) / f.f(i).sqrt()).collect()
        };
        let before = innovations(&s);
        let phi = s.params()[0].kernel.phi.clone();
        let mut accepted = false;
        for _ in 0..50 {
            accepted |= s.update_whitened(0).unwrap();
        }
        assert!(accepted);
        assert_ne!(s.params()[0].kernel.phi, phi);
        for (a, b) in before.iter().zip(innovations(&s)) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut fresh = s.state().clone();
        crate::model::compose_y(&mut fresh, s.params(), &model);
        for (a, b) in fresh.y.iter().flatten().zip(s.state().y.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adaptation_only_during_burn_in() {
        let (model, priors) = small();
        let mut s = Sampler::new(&model, &priors, cfg(40, 20, 1)).unwrap();
        s.run(None).unwrap();
        let acc = &s.acceptance()[0];
        assert_eq!(acc.proposed, 40);
        assert_eq!(acc.proposed_kept, 20);
    }

    #[test]
    fn progress_hook_fires() {
        let (model, priors) = small();
        let mut s = Sampler::new(
            &model,
            &priors,
            SamplerConfig {
                report_every: 5,
                ..cfg(20, 0, 1)
            },
        )
        .unwrap();
        let mut seen = Vec::new();
        let mut hook = |p: &Progress| seen.push(p.iter);
        s.run(Some(&mut hook)).unwrap();
        assert_eq!(seen, vec![5, 10, 15, 20]);
    }
}
