#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use nncgp::covariance::KernelParams;
use nncgp::geometry::{FidelityDataset, Location};
use nncgp::model::{compose_y, LatentState, LevelParams, Model, Priors};
use nncgp::nngp::{sample_nngp_prior, NngpFactors};
use nncgp::rng::{inv_gamma, std_normal};

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic 1% critical
/// value `c(0.01) sqrt((n + m) / (n m))`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    (d, 1.628 * ((n + m) / (n * m)).sqrt())
}

pub fn brute_force_nearest(locs: &[Location], q: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..locs.len()).collect();
    let d = |i: usize| -> f64 { locs[i].coords().iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum() };
    idx.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn uniform_locations<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Location> {
    (0..n)
        .map(|_| Location::new((0..dim).map(|_| rng.random()).collect()).unwrap())
        .collect()
}

/// Dense exponential covariance written out independently of the library.
pub fn dense_cov(locs: &[Location], sigma2: f64, phi: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(locs.len(), locs.len(), |i, j| {
        let s: f64 = locs[i]
            .coords()
            .iter()
            .zip(locs[j].coords())
            .zip(phi)
            .map(|((a, b), p)| (a - b).abs() / p)
            .sum();
        sigma2 * (-0.5 * s).exp()
    })
}

/// Zero-mean Gaussian log-density via a dense Cholesky factor.
pub fn dense_logpdf(x: &[f64], cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("positive definite");
    let x = DVector::from_column_slice(x);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let quad = x.dot(&chol.solve(&x));
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Sample mean, variance and the standard errors of both.
pub fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let c = |k: i32| x.iter().map(|v| (v - m).powi(k)).sum::<f64>() / n;
    let (v, m4) = (c(2), c(4));
    (m, v, (v / n).sqrt(), ((m4 - v * v) / n).sqrt())
}

/// Parameters and latent values drawn from the prior.
pub fn draw_prior<R: Rng>(model: &Model, priors: &Priors, rng: &mut R) -> (Vec<LevelParams>, Vec<Vec<f64>>) {
    let mut params = Vec::new();
    let mut w = Vec::new();
    for (t, p) in priors.levels.iter().enumerate() {
        let normal = |rng: &mut R, m: &[f64], v: &[f64]| -> Vec<f64> {
            m.iter().zip(v).map(|(m, v)| m + v.sqrt() * std_normal(rng)).collect()
        };
        let beta = normal(rng, &p.beta_mean, &p.beta_var);
        let gamma = normal(rng, &p.gamma_mean, &p.gamma_var);
        let sigma2 = inv_gamma(rng, p.sigma2_shape, p.sigma2_rate);
        let tau2 = inv_gamma(rng, p.tau2_shape, p.tau2_rate);
        let phi = p.phi_upper.iter().map(|l| l * rng.random::<f64>()).collect();
        let kernel = KernelParams::new(sigma2, phi).unwrap();
        let g = &model.graphs()[t];
        let f = NngpFactors::compute(g, model.refsets()[t].combined(), &kernel).unwrap();
        w.push(sample_nngp_prior(&f, g, rng));
        params.push(LevelParams {
            beta,
            gamma,
            kernel,
            tau2,
        });
    }
    (params, w)
}

/// Responses drawn from the likelihood at the given state.
pub fn draw_data<R: Rng>(model: &Model, params: &[LevelParams], w: &[Vec<f64>], rng: &mut R) -> Vec<Vec<f64>> {
    let mut state = LatentState {
        w: w.to_vec(),
        y: Vec::new(),
    };
    compose_y(&mut state, params, model);
    model
        .datasets()
        .iter()
        .enumerate()
        .map(|(t, d)| {
            (0..d.len())
                .map(|r| state.y[t][r] + params[t].tau2.sqrt() * std_normal(rng))
                .collect()
        })
        .collect()
}

pub fn dataset(level: usize, locs: Vec<Location>) -> FidelityDataset {
    let z = vec![0.0; locs.len()];
    FidelityDataset::new(level, locs, z).unwrap()
}
