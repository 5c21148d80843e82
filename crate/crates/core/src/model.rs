//! Parameters, priors, latent state and the joint posterior density.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariance::KernelParams;
use crate::geometry::{augment_reference_sets, AugmentedReferenceSet, FidelityDataset, NeighborGraph};
use crate::nngp::{nngp_log_density, NngpFactors};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Regression basis evaluated at a location.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// `[1]`
    #[default]
    Constant,
    /// `[1, s_1, ..., s_d]`
    Linear,
}

impl Basis {
    pub fn size(self, dim: usize) -> usize {
        match self {
            Basis::Constant => 1,
            Basis::Linear => 1 + dim,
        }
    }

    pub fn eval(self, s: &[f64]) -> Vec<f64> {
        match self {
            Basis::Constant => vec![1.0],
            Basis::Linear => std::iter::once(1.0).chain(s.iter().copied()).collect(),
        }
    }
}

/// Trend basis `h_t` and scale basis `g_t` of one level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    #[serde(default)]
    pub trend: Basis,
    #[serde(default)]
    pub scale: Basis,
}

/// `Theta_t = (beta_t, gamma_{t-1}, sigma2_t, phi_t, tau2_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub beta: Vec<f64>,
    /// Scale-discrepancy coefficients linking this level to the one below;
    /// empty at level 1.
    pub gamma: Vec<f64>,
    pub kernel: KernelParams,
    pub tau2: f64,
}

impl LevelParams {
    fn validate(&self, level: usize, basis: BasisSpec, dim: usize) -> Result<()> {
        self.kernel.validate()?;
        if self.kernel.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.kernel.dim(),
            });
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::invalid(format!("level {level}: tau2 must be positive")));
        }
        check_len("beta", self.beta.len(), basis.trend.size(dim))?;
        let g = if level == 1 { 0 } else { basis.scale.size(dim) };
        check_len("gamma", self.gamma.len(), g)?;
        if self.beta.iter().chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("level {level}: non-finite coefficient")));
        }
        Ok(())
    }
}

fn check_len(what: &'static str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::LengthMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Priors of one level. Normal priors are independent across coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPriors {
    pub beta_mean: Vec<f64>,
    pub beta_var: Vec<f64>,
    pub gamma_mean: Vec<f64>,
    pub gamma_var: Vec<f64>,
    /// `sigma2 ~ IG(shape, rate)`
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    /// `tau2 ~ IG(shape, rate)`
    pub tau2_shape: f64,
    pub tau2_rate: f64,
    /// `phi_j ~ U(0, phi_upper_j)`
    pub phi_upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub levels: Vec<LevelPriors>,
}

/// Scalar prior settings broadcast to every level and coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub beta_mean: f64,
    pub beta_var: f64,
    pub gamma_mean: f64,
    pub gamma_var: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    pub tau2_shape: f64,
    pub tau2_rate: f64,
    pub phi_upper: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            beta_mean: 0.0,
            beta_var: 1e4,
            gamma_mean: 0.0,
            gamma_var: 1e4,
            sigma2_shape: 2.0,
            sigma2_rate: 1.0,
            tau2_shape: 2.0,
            tau2_rate: 1.0,
            phi_upper: 100.0,
        }
    }
}

impl PriorSpec {
    pub fn expand(&self, bases: &[BasisSpec], dim: usize) -> Result<Priors> {
        let levels = bases
            .iter()
            .enumerate()
            .map(|(t, b)| {
                let p = b.trend.size(dim);
                let q = if t == 0 { 0 } else { b.scale.size(dim) };
                LevelPriors {
                    beta_mean: vec![self.beta_mean; p],
                    beta_var: vec![self.beta_var; p],
                    gamma_mean: vec![self.gamma_mean; q],
                    gamma_var: vec![self.gamma_var; q],
                    sigma2_shape: self.sigma2_shape,
                    sigma2_rate: self.sigma2_rate,
                    tau2_shape: self.tau2_shape,
                    tau2_rate: self.tau2_rate,
                    phi_upper: vec![self.phi_upper; dim],
                }
            })
            .collect();
        let priors = Priors { levels };
        priors.validate()?;
        Ok(priors)
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (t, p) in self.levels.iter().enumerate() {
            let positive = p
                .beta_var
                .iter()
                .chain(&p.gamma_var)
                .chain(&p.phi_upper)
                .chain([&p.sigma2_shape, &p.sigma2_rate, &p.tau2_shape, &p.tau2_rate])
                .all(|v| *v > 0.0 && v.is_finite());
            if !positive {
                return Err(Error::invalid(format!(
                    "level {}: prior variances, shapes, rates and phi bounds must be positive",
                    t + 1
                )));
            }
            check_len("beta prior", p.beta_var.len(), p.beta_mean.len())?;
            check_len("gamma prior", p.gamma_var.len(), p.gamma_mean.len())?;
        }
        Ok(())
    }

    /// Initial parameters: normal coefficients at their prior means, variances
    /// at the inverse-gamma mean `rate / (shape - 1)` (the rate when the mean
    /// is infinite), ranges at half their upper bound.
    pub fn initial_params(&self) -> Vec<LevelParams> {
        let ig_mean = |a: f64, b: f64| if a > 1.0 { b / (a - 1.0) } else { b };
        self.levels
            .iter()
            .map(|p| LevelParams {
                beta: p.beta_mean.clone(),
                gamma: p.gamma_mean.clone(),
                kernel: KernelParams {
                    sigma2: ig_mean(p.sigma2_shape, p.sigma2_rate),
                    phi: p.phi_upper.iter().map(|l| 0.5 * l).collect(),
                },
                tau2: ig_mean(p.tau2_shape, p.tau2_rate),
            })
            .collect()
    }

    /// `log p(Theta_t)`; `-inf` outside the support.
    pub fn log_density(&self, t: usize, theta: &LevelParams) -> f64 {
        let p = &self.levels[t];
        let normal = |x: &[f64], m: &[f64], v: &[f64]| -> f64 {
            x.iter()
                .zip(m)
                .zip(v)
                .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v))
                .sum()
        };
        let ig = |x: f64, a: f64, b: f64| -> f64 {
            if x <= 0.0 {
                return f64::NEG_INFINITY;
            }
            a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
        };
        let mut phi = 0.0;
        for (f, l) in theta.kernel.phi.iter().zip(&p.phi_upper) {
            if *f <= 0.0 || f >= l {
                return f64::NEG_INFINITY;
            }
            phi -= l.ln();
        }
        normal(&theta.beta, &p.beta_mean, &p.beta_var)
            + normal(&theta.gamma, &p.gamma_mean, &p.gamma_var)
            + ig(theta.kernel.sigma2, p.sigma2_shape, p.sigma2_rate)
            + ig(theta.tau2, p.tau2_shape, p.tau2_rate)
            + phi
    }
}

/// Latent fields `w~_t` and composed means `y~_t` over each `S~_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub w: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// Data, augmented reference sets, neighbor graphs and design values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    m: usize,
    dim: usize,
    datasets: Vec<FidelityDataset>,
    refsets: Vec<AugmentedReferenceSet>,
    graphs: Vec<NeighborGraph>,
    bases: Vec<BasisSpec>,
    /// `h[t][k]`: trend basis at site `k` of `S~_t`.
    h: Vec<Vec<Vec<f64>>>,
    /// `g[t][k]`: scale basis at site `k` of `S~_t` (empty at level 1).
    g: Vec<Vec<Vec<f64>>>,
    /// `chains[t][k]`: `(level, index)` of site `k` of `S~_t` in every
    /// `S~_L`, `L >= t`, starting with `(t, k)`.
    chains: Vec<Vec<Vec<(usize, usize)>>>,
}

impl Model {
    /// `bases` holds one entry per level, or a single entry used for all.
    pub fn new(datasets: Vec<FidelityDataset>, m: usize, bases: &[BasisSpec]) -> Result<Self> {
        let refsets = augment_reference_sets(&datasets)?;
        let t_max = datasets.len();
        let bases: Vec<BasisSpec> = match bases.len() {
            0 => vec![BasisSpec::default(); t_max],
            1 => vec![bases[0]; t_max],
            n if n == t_max => bases.to_vec(),
            n => {
                return Err(Error::LengthMismatch {
                    what: "basis list",
                    expected: t_max,
                    found: n,
                })
            }
        };
        let graphs = refsets
            .iter()
            .map(|r| NeighborGraph::for_reference_set(r, m))
            .collect::<Result<Vec<_>>>()?;
        let dim = datasets[0].dim();
        let h = refsets
            .iter()
            .zip(&bases)
            .map(|(r, b)| r.combined().iter().map(|s| b.trend.eval(s.coords())).collect())
            .collect();
        let g = refsets
            .iter()
            .zip(&bases)
            .enumerate()
            .map(|(t, (r, b))| {
                if t == 0 {
                    Vec::new()
                } else {
                    r.combined().iter().map(|s| b.scale.eval(s.coords())).collect()
                }
            })
            .collect();
        let chains = (0..t_max)
            .map(|t| {
                (0..refsets[t].len())
                    .map(|k| {
                        let mut chain = vec![(t, k)];
                        let mut cur = Some(k);
                        for l in t..t_max - 1 {
                            cur = cur.and_then(|c| refsets[l].up()[c]);
                            match cur {
                                Some(c) => chain.push((l + 1, c)),
                                None => break,
                            }
                        }
                        chain
                    })
                    .collect()
            })
            .collect();
        Ok(Model {
            m,
            dim,
            datasets,
            refsets,
            graphs,
            bases,
            h,
            g,
            chains,
        })
    }

    pub fn levels(&self) -> usize {
        self.datasets.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn datasets(&self) -> &[FidelityDataset] {
        &self.datasets
    }

    pub fn refsets(&self) -> &[AugmentedReferenceSet] {
        &self.refsets
    }

    pub fn graphs(&self) -> &[NeighborGraph] {
        &self.graphs
    }

    pub fn bases(&self) -> &[BasisSpec] {
        &self.bases
    }

    pub fn trend_at(&self, t: usize, k: usize) -> &[f64] {
        &self.h[t][k]
    }

    pub fn scale_at(&self, t: usize, k: usize) -> &[f64] {
        &self.g[t][k]
    }

    pub fn chain(&self, t: usize, k: usize) -> &[(usize, usize)] {
        &self.chains[t][k]
    }

    /// `zeta_{t-1}` at site `k` of `S~_t` (0-based `t >= 1`).
    pub fn zeta(&self, t: usize, k: usize, params: &[LevelParams]) -> f64 {
        dot(&self.g[t][k], &params[t].gamma)
    }

    pub fn validate_params(&self, params: &[LevelParams]) -> Result<()> {
        check_len("level parameters", params.len(), self.levels())?;
        for (t, p) in params.iter().enumerate() {
            p.validate(t + 1, self.bases[t], self.dim)?;
        }
        Ok(())
    }

    pub fn validate_priors(&self, priors: &Priors) -> Result<()> {
        priors.validate()?;
        check_len("level priors", priors.levels.len(), self.levels())?;
        for (t, p) in priors.levels.iter().enumerate() {
            check_len("beta prior", p.beta_mean.len(), self.bases[t].trend.size(self.dim))?;
            let q = if t == 0 { 0 } else { self.bases[t].scale.size(self.dim) };
            check_len("gamma prior", p.gamma_mean.len(), q)?;
            check_len("phi bound", p.phi_upper.len(), self.dim)?;
        }
        Ok(())
    }

    /// Latent state with every `w` at zero and `y` composed.
    pub fn zero_state(&self, params: &[LevelParams]) -> LatentState {
        let w = self.refsets.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut state = LatentState { w, y: Vec::new() };
        compose_y(&mut state, params, self);
        state
    }

    pub fn factors(&self, params: &[LevelParams]) -> Result<Vec<NngpFactors>> {
        self.graphs
            .iter()
            .zip(&self.refsets)
            .zip(params)
            .map(|((g, r), p)| NngpFactors::compute(g, r.combined(), &p.kernel))
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Recomputes `y~_t = zeta_{t-1} y~_{t-1} + h_t beta_t + w~_t` for every level.
pub fn compose_y(state: &mut LatentState, params: &[LevelParams], model: &Model) {
    let mut y: Vec<Vec<f64>> = Vec::with_capacity(model.levels());
    for t in 0..model.levels() {
        let r = &model.refsets[t];
        let yt = (0..r.len())
            .map(|k| {
                let below = if t == 0 {
                    0.0
                } else {
                    model.zeta(t, k, params) * y[t - 1][r.parent()[k]]
                };
                below + dot(&model.h[t][k], &params[t].beta) + state.w[t][k]
            })
            .collect();
        y.push(yt);
    }
    state.y = y;
}

/// `sum log N(z_t | y_t(S_t), tau2_t)` over the rows of level `t`.
pub fn log_likelihood_level(model: &Model, state: &LatentState, params: &[LevelParams], t: usize) -> f64 {
    gaussian_loglik(model.datasets[t].values(), &state.y[t], params[t].tau2)
}

/// `sum_i log N(z_i | y_i, tau2)`; `y` may be longer than `z`.
pub(crate) fn gaussian_loglik(z: &[f64], y: &[f64], tau2: f64) -> f64 {
    let sse: f64 = z.iter().zip(y).map(|(z, y)| (z - y) * (z - y)).sum();
    -0.5 * (z.len() as f64 * (LN_2PI + tau2.ln()) + sse / tau2)
}

/// Log of the unnormalized joint posterior
/// `sum_t [log p(Theta_t) + log p~(w~_t | theta_t) + log N(z_t | y_t, tau2_t)]`.
pub fn log_joint(
    model: &Model,
    state: &LatentState,
    params: &[LevelParams],
    priors: &Priors,
    factors: &[NngpFactors],
) -> Result<f64> {
    let z: Vec<Vec<f64>> = model.datasets.iter().map(|d| d.values().to_vec()).collect();
    log_joint_with(model, state, params, priors, factors, &z)
}

pub(crate) fn log_joint_with(
    model: &Model,
    state: &LatentState,
    params: &[LevelParams],
    priors: &Priors,
    factors: &[NngpFactors],
    z: &[Vec<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..model.levels() {
        let terms = [
            ("prior", priors.log_density(t, &params[t])),
            (
                "latent",
                nngp_log_density(&state.w[t], &factors[t], &model.graphs[t])?,
            ),
            ("likelihood", gaussian_loglik(&z[t], &state.y[t], params[t].tau2)),
        ];
        for (name, v) in terms {
            if !v.is_finite() {
                return Err(Error::NonFiniteTerm(format!("level {} {name} = {v}", t + 1)));
            }
            total += v;
        }
    }
    Ok(total)
}
