//! Dense exact co-kriging on small instances.
//!
//! The marginal of `z_t(s)` under the autoregressive model is Gaussian with
//!
//! ```text
//! mean  sum_{i<=t} a_{t,i}(s) h_i(s)' beta_i
//! cov   sum_{i<=min(t,t')} a_{t,i}(s) a_{t',i}(s') C_i(s, s') + [same point] tau2_t
//! ```
//!
//! where `a_{t,i}(s) = prod_{j=i+1..t} zeta_{j-1}(s)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::covariance::{correlation, cross_cov, KernelParams};
use crate::geometry::{FidelityDataset, Location, NeighborGraph};
use crate::model::{dot, BasisSpec, LevelParams, Model};
use crate::nngp::{nngp_log_density, NngpFactors};
use crate::rng::{std_normal, substream};
use crate::sampler::{Sampler, SamplerConfig};
use crate::{Error, Result};

pub const DEFAULT_CAP: usize = 500;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A response `z_t(s)` (`level` is 1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct DensePoint {
    pub level: usize,
    pub loc: Location,
}

#[derive(Clone, Debug)]
pub struct DenseJoint {
    pub mu: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

impl DenseJoint {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Scale products `a_{t,i}(s)` for `i = 0..=t` (0-based levels).
fn scale_products(t: usize, s: &[f64], params: &[LevelParams], bases: &[BasisSpec]) -> Vec<f64> {
    let mut a = vec![1.0; t + 1];
    for i in (0..t).rev() {
        let zeta = dot(&bases[i + 1].scale.eval(s), &params[i + 1].gamma);
        a[i] = a[i + 1] * zeta;
    }
    a
}

/// Joint mean and covariance of arbitrary responses.
pub fn dense_joint(
    points: &[DensePoint],
    params: &[LevelParams],
    bases: &[BasisSpec],
    cap: usize,
) -> Result<DenseJoint> {
    let n = points.len();
    if n > cap {
        return Err(Error::SizeCap { size: n, cap });
    }
    if n == 0 {
        return Err(Error::EmptyLocations);
    }
    let t_max = params.len();
    if bases.len() != t_max {
        return Err(Error::LengthMismatch {
            what: "basis list",
            expected: t_max,
            found: bases.len(),
        });
    }
    if let Some(p) = points.iter().find(|p| p.level == 0 || p.level > t_max) {
        return Err(Error::invalid(format!("level {} outside 1..={t_max}", p.level)));
    }
    let a: Vec<Vec<f64>> = points
        .iter()
        .map(|p| scale_products(p.level - 1, p.loc.coords(), params, bases))
        .collect();
    let mu = DVector::from_iterator(
        n,
        points.iter().zip(&a).map(|(p, a)| {
            (0..p.level)
                .map(|i| a[i] * dot(&bases[i].trend.eval(p.loc.coords()), &params[i].beta))
                .sum::<f64>()
        }),
    );
    let mut lambda = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            let (p, q) = (&points[r], &points[c]);
            let v: f64 = (0..p.level.min(q.level))
                .map(|i| {
                    let k = &params[i].kernel;
                    a[r][i] * a[c][i] * k.sigma2 * correlation(p.loc.coords(), q.loc.coords(), &k.phi)
                })
                .sum();
            lambda[(r, c)] = v;
            lambda[(c, r)] = v;
        }
        lambda[(r, r)] += params[points[r].level - 1].tau2;
    }
    Ok(DenseJoint { mu, lambda })
}

/// Stacks all rows of all levels in level order.
pub fn dataset_points(datasets: &[FidelityDataset]) -> Vec<DensePoint> {
    datasets
        .iter()
        .flat_map(|d| {
            d.locations().iter().map(move |l| DensePoint {
                level: d.level(),
                loc: l.clone(),
            })
        })
        .collect()
}

/// Marginal mean and covariance of the stacked observations.
pub fn dense_marginal_cov(
    datasets: &[FidelityDataset],
    params: &[LevelParams],
    bases: &[BasisSpec],
    cap: usize,
) -> Result<DenseJoint> {
    dense_joint(&dataset_points(datasets), params, bases, cap)
}

/// Multivariate normal log-density.
pub fn mvn_log_density(x: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mu.len() || cov.nrows() != mu.len() {
        return Err(Error::LengthMismatch {
            what: "dense vector",
            expected: mu.len(),
            found: x.len(),
        });
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("dense covariance is not positive definite".into()))?;
    let r = x - mu;
    let sol = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (x.len() as f64 * LN_2PI + logdet + r.dot(&sol)))
}

pub fn dense_log_likelihood(z: &[f64], joint: &DenseJoint) -> Result<f64> {
    mvn_log_density(&DVector::from_column_slice(z), &joint.mu, &joint.lambda)
}

/// Mean and covariance of `targets` given the responses at `observed`.
pub fn dense_conditional(
    joint: &DenseJoint,
    observed: &[usize],
    z_obs: &[f64],
    targets: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if observed.len() != z_obs.len() {
        return Err(Error::LengthMismatch {
            what: "observed values",
            expected: observed.len(),
            found: z_obs.len(),
        });
    }
    if targets.iter().any(|t| observed.contains(t)) {
        return Err(Error::invalid("target and observed indices overlap"));
    }
    let sub = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| joint.lambda[(rows[i], cols[j])])
    };
    let mu_t = DVector::from_iterator(targets.len(), targets.iter().map(|&i| joint.mu[i]));
    let cov_tt = sub(targets, targets);
    if observed.is_empty() {
        return Ok((mu_t, cov_tt));
    }
    let resid = DVector::from_iterator(
        observed.len(),
        observed.iter().zip(z_obs).map(|(&i, z)| z - joint.mu[i]),
    );
    let chol = sub(observed, observed)
        .cholesky()
        .ok_or_else(|| Error::Factorization("observed covariance block is singular".into()))?;
    let cov_to = sub(targets, observed);
    let mean = mu_t + &cov_to * chol.solve(&resid);
    let cov = cov_tt - &cov_to * chol.solve(&cov_to.transpose());
    Ok((mean, cov))
}

/// Outcome of one check in [`oracle_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOptions {
    /// Sizes of the full-conditioning exactness checks.
    pub sizes: Vec<usize>,
    pub seed: u64,
    /// Perturb one conditional variance to confirm the checks can fail.
    pub inject_fault: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            sizes: vec![20, 50, 200],
            seed: 1,
            inject_fault: false,
        }
    }
}

fn random_locations(n: usize, seed: u64, stream: u64) -> Vec<Location> {
    let mut rng = substream(seed, stream);
    (0..n)
        .map(|_| Location::new(vec![rng.random(), rng.random()]).expect("finite"))
        .collect()
}

fn random_kernel(seed: u64, stream: u64) -> KernelParams {
    let mut rng = substream(seed, stream);
    KernelParams {
        sigma2: rng.random_range(0.5..2.0),
        phi: vec![rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)],
    }
}

fn corrupt(f: &mut NngpFactors, i: usize) {
    let v = f.f_tilde(i);
    f.corrupt_f_tilde(i, 1.5 * v + 0.1);
}

/// Compares the sparse components against dense exact computations.
pub fn oracle_suite(opts: &OracleOptions) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    for (c, &n) in opts.sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyLocations);
        }
        let locs = random_locations(n, opts.seed, 10 + c as u64);
        let kernel = random_kernel(opts.seed, 20 + c as u64);
        let graph = NeighborGraph::build(&locs, (n - 1).max(1))?;
        let mut f = NngpFactors::compute(&graph, &locs, &kernel)?;
        if opts.inject_fault {
            corrupt(&mut f, n / 2);
        }
        let mut rng = substream(opts.seed, 30 + c as u64);
        let w: Vec<f64> = (0..n).map(|_| std_normal(&mut rng)).collect();
        let sparse = nngp_log_density(&w, &f, &graph)?;
        let dense = mvn_log_density(
            &DVector::from_column_slice(&w),
            &DVector::zeros(n),
            &cross_cov(&locs, &locs, &kernel)?,
        )?;
        let rel = ((sparse - dense) / dense).abs();
        out.push(OracleCheck {
            name: format!("nngp_full_conditioning_n{n}"),
            passed: rel <= 1e-8,
            detail: format!("sparse {sparse:.12e} dense {dense:.12e} rel {rel:.2e}"),
        });
    }

    {
        let n = 15;
        let locs = random_locations(n, opts.seed, 40);
        let kernel = random_kernel(opts.seed, 41);
        let graph = NeighborGraph::build(&locs, 4)?;
        let mut f = NngpFactors::compute(&graph, &locs, &kernel)?;
        if opts.inject_fault {
            corrupt(&mut f, n / 2);
        }
        let c = cross_cov(&locs, &locs, &kernel)?;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let nb = graph.neighbors(i);
            let joint = DenseJoint {
                mu: DVector::zeros(n),
                lambda: c.clone(),
            };
            let (b, var) = if nb.is_empty() {
                (Vec::new(), c[(i, i)])
            } else {
                let cnn = DMatrix::from_fn(nb.len(), nb.len(), |a, b| c[(nb[a], nb[b])]);
                let cin = DVector::from_fn(nb.len(), |a, _| c[(i, nb[a])]);
                let chol = cnn
                    .cholesky()
                    .ok_or_else(|| Error::Factorization("neighbor block".into()))?;
                let b = chol.solve(&cin);
                let (_, v) = dense_conditional(&joint, nb, &vec![0.0; nb.len()], &[i])?;
                (b.as_slice().to_vec(), v[(0, 0)])
            };
            for (x, y) in b.iter().zip(f.b(i)) {
                worst = worst.max((x - y).abs());
            }
            worst = worst.max((var - f.f(i)).abs());
        }
        out.push(OracleCheck {
            name: "nngp_factors_vs_dense_conditioning".into(),
            passed: worst <= 1e-8,
            detail: format!("max abs difference {worst:.2e}"),
        });
    }

    let worst = latent_conditional_discrepancy(opts.seed)?;
    out.push(OracleCheck {
        name: "latent_conditionals_vs_dense_posterior".into(),
        passed: worst <= 1e-8,
        detail: format!("max relative difference {worst:.2e}"),
    });
    Ok(out)
}

/// Largest relative gap between the sampler's single-site latent
/// conditionals and those read off the dense joint precision of
/// `(w~_1, w~_2 | z)` on a two-level instance at full conditioning.
fn latent_conditional_discrepancy(seed: u64) -> Result<f64> {
    let l1 = random_locations(12, seed, 50);
    let mut l2 = random_locations(5, seed, 51);
    l2.extend(l1[..3].iter().cloned());
    let mut rng = substream(seed, 52);
    let z1: Vec<f64> = (0..l1.len()).map(|_| 10.0 + 2.0 * std_normal(&mut rng)).collect();
    let z2: Vec<f64> = (0..l2.len()).map(|_| 11.0 + 2.0 * std_normal(&mut rng)).collect();
    let datasets = vec![
        FidelityDataset::new(1, l1, z1.clone())?,
        FidelityDataset::new(2, l2, z2.clone())?,
    ];
    let probe = Model::new(datasets.clone(), 1, &[])?;
    let m = probe.refsets()[0].len() - 1;
    let model = Model::new(datasets, m, &[])?;
    let params = vec![
        LevelParams {
            beta: vec![10.0],
            gamma: vec![],
            kernel: KernelParams::new(4.0, vec![0.1, 0.2])?,
            tau2: 0.1,
        },
        LevelParams {
            beta: vec![1.0],
            gamma: vec![0.8],
            kernel: KernelParams::new(1.0, vec![0.3, 0.1])?,
            tau2: 0.05,
        },
    ];
    let priors = crate::model::PriorSpec::default().expand(model.bases(), 2)?;
    let w: Vec<Vec<f64>> = model
        .refsets()
        .iter()
        .map(|r| (0..r.len()).map(|_| std_normal(&mut rng)).collect())
        .collect();
    let sampler = Sampler::with_state(&model, &priors, SamplerConfig::default(), params.clone(), Some(w.clone()))?;

    // Global latent index of (level, site).
    let offsets: Vec<usize> = model
        .refsets()
        .iter()
        .scan(0, |acc, r| {
            let o = *acc;
            *acc += r.len();
            Some(o)
        })
        .collect();
    let total: usize = model.refsets().iter().map(|r| r.len()).sum();
    let mut q = DMatrix::<f64>::zeros(total, total);
    for (t, r) in model.refsets().iter().enumerate() {
        let c = cross_cov(r.combined(), r.combined(), &params[t].kernel)?;
        let inv = c
            .try_inverse()
            .ok_or_else(|| Error::Factorization("dense latent covariance".into()))?;
        q.view_mut((offsets[t], offsets[t]), (r.len(), r.len())).copy_from(&inv);
    }
    let mut lin = DVector::<f64>::zeros(total);
    let bases = model.bases();
    for (l, d) in model.datasets().iter().enumerate() {
        for (row, s) in d.locations().iter().enumerate() {
            let a = scale_products(l, s.coords(), &params, bases);
            let mut coef = vec![(0usize, 0.0f64); l + 1];
            let mut mu = 0.0;
            for t in 0..=l {
                let k = model.refsets()[t]
                    .index_of(l + 1, row)
                    .ok_or_else(|| Error::invalid("nesting violated"))?;
                coef[t] = (offsets[t] + k, a[t]);
                mu += a[t] * dot(&bases[t].trend.eval(s.coords()), &params[t].beta);
            }
            let tau2 = params[l].tau2;
            let r = d.values()[row] - mu;
            for &(i, ai) in &coef {
                lin[i] += ai * r / tau2;
                for &(j, aj) in &coef {
                    q[(i, j)] += ai * aj / tau2;
                }
            }
        }
    }
    let flat: Vec<f64> = w.iter().flatten().copied().collect();
    let mut worst: f64 = 0.0;
    for (t, r) in model.refsets().iter().enumerate() {
        for k in 0..r.len() {
            let g = offsets[t] + k;
            let others: f64 = (0..total).filter(|&j| j != g).map(|j| q[(g, j)] * flat[j]).sum();
            let var = 1.0 / q[(g, g)];
            let mean = (lin[g] - others) * var;
            let (m_s, v_s) = sampler.w_conditional(t, k);
            worst = worst
                .max((m_s - mean).abs() / mean.abs().max(1.0))
                .max((v_s - var).abs() / var);
        }
    }
    Ok(worst)
}
