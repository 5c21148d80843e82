//! Nearest-neighbor GP factors `w_i | w_N(i) ~ N(b_i' w_N(i), f_i)`.
//!
//! Factors are held in correlation form (`f_i = sigma2 * f~_i`) so a change of
//! `sigma2` alone is a constant-time rescale.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{cholesky_with_jitter, correlation, KernelParams, JITTER};
use crate::geometry::{Location, NeighborGraph};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NngpFactors {
    sigma2: f64,
    /// Indexed by point, aligned with `graph.neighbors(i)`.
    b: Vec<Vec<f64>>,
    f_tilde: Vec<f64>,
}

impl NngpFactors {
    pub fn compute(graph: &NeighborGraph, locs: &[Location], p: &KernelParams) -> Result<Self> {
        p.validate()?;
        if locs.len() != graph.len() {
            return Err(Error::LengthMismatch {
                what: "locations",
                expected: graph.len(),
                found: locs.len(),
            });
        }
        if let Some(l) = locs.iter().find(|l| l.dim() != p.dim()) {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                found: l.dim(),
            });
        }
        let rows: Vec<(Vec<f64>, f64)> = (0..locs.len())
            .into_par_iter()
            .map(|i| conditional_row(locs, i, graph.neighbors(i), &p.phi))
            .collect::<Result<_>>()?;
        let (b, f_tilde) = rows.into_iter().unzip();
        Ok(NngpFactors {
            sigma2: p.sigma2,
            b,
            f_tilde,
        })
    }

    /// Same correlation structure at a new variance.
    pub fn rescale(&mut self, sigma2: f64) {
        self.sigma2 = sigma2;
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn len(&self) -> usize {
        self.f_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_tilde.is_empty()
    }

    pub fn b(&self, i: usize) -> &[f64] {
        &self.b[i]
    }

    pub fn f(&self, i: usize) -> f64 {
        self.sigma2 * self.f_tilde[i]
    }

    pub fn f_tilde(&self, i: usize) -> f64 {
        self.f_tilde[i]
    }

    /// Conditional mean `b_i' w_N(i)`.
    pub fn cond_mean(&self, graph: &NeighborGraph, i: usize, w: &[f64]) -> f64 {
        graph
            .neighbors(i)
            .iter()
            .zip(&self.b[i])
            .map(|(&j, b)| b * w[j])
            .sum()
    }

    /// Test hook: overwrite one conditional variance.
    #[doc(hidden)]
    pub fn corrupt_f_tilde(&mut self, i: usize, value: f64) {
        self.f_tilde[i] = value;
    }
}

/// Conditional coefficients and correlation-scale variance of point `i`.
pub(crate) fn conditional_row(
    locs: &[Location],
    i: usize,
    nbrs: &[usize],
    phi: &[f64],
) -> Result<(Vec<f64>, f64)> {
    conditional_row_at(locs, locs[i].coords(), nbrs, phi, i)
}

/// As [`conditional_row`] for an arbitrary target point.
pub(crate) fn conditional_row_at(
    locs: &[Location],
    target: &[f64],
    nbrs: &[usize],
    phi: &[f64],
    index: usize,
) -> Result<(Vec<f64>, f64)> {
    let k = nbrs.len();
    if k == 0 {
        return Ok((Vec::new(), 1.0));
    }
    let r_nn = DMatrix::from_fn(k, k, |a, b| {
        correlation(locs[nbrs[a]].coords(), locs[nbrs[b]].coords(), phi)
    });
    let r = DVector::from_iterator(k, nbrs.iter().map(|&j| correlation(target, locs[j].coords(), phi)));
    let chol = cholesky_with_jitter(r_nn, 1.0, index)?;
    let b = chol.solve(&r);
    let f = (1.0 - r.dot(&b)).max(JITTER);
    Ok((b.as_slice().to_vec(), f))
}

fn check_len(w: &[f64], graph: &NeighborGraph, factors: &NngpFactors) -> Result<()> {
    if w.len() != graph.len() || factors.len() != graph.len() {
        return Err(Error::LengthMismatch {
            what: "latent vector",
            expected: graph.len(),
            found: w.len(),
        });
    }
    Ok(())
}

/// `sum_i log N(w_i | b_i' w_N(i), f_i)`.
pub fn nngp_log_density(w: &[f64], factors: &NngpFactors, graph: &NeighborGraph) -> Result<f64> {
    check_len(w, graph, factors)?;
    let n = w.len() as f64;
    let ln_f: f64 = factors.f_tilde.iter().map(|f| f.ln()).sum();
    let quad = quad_form_tilde(w, factors, graph)?;
    Ok(-0.5 * (n * (LN_2PI + factors.sigma2.ln()) + ln_f + quad / factors.sigma2))
}

/// `sum_i (w_i - b_i' w_N(i))^2 / f~_i`, the quadratic form at unit variance.
pub fn quad_form_tilde(w: &[f64], factors: &NngpFactors, graph: &NeighborGraph) -> Result<f64> {
    check_len(w, graph, factors)?;
    Ok((0..w.len())
        .map(|i| {
            let u = w[i] - factors.cond_mean(graph, i, w);
            u * u / factors.f_tilde[i]
        })
        .sum())
}

/// Sequential draw from the NNGP prior in graph order.
pub fn sample_nngp_prior<R: Rng + ?Sized>(
    factors: &NngpFactors,
    graph: &NeighborGraph,
    rng: &mut R,
) -> Vec<f64> {
    let mut w = vec![0.0; graph.len()];
    for &i in graph.order() {
        let z: f64 = rng.sample(StandardNormal);
        w[i] = factors.cond_mean(graph, i, &w) + factors.f(i).sqrt() * z;
    }
    w
}

/// Structural nonzero counts of the NNGP precision `(I - B)' F^-1 (I - B)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionSparsity {
    pub diagonal: usize,
    /// Strictly lower-triangular entries.
    pub off_diagonal: usize,
}

pub fn precision_sparsity(factors: &NngpFactors, graph: &NeighborGraph) -> PrecisionSparsity {
    let mut pairs: HashSet<(usize, usize)> = HashSet::new();
    for i in 0..graph.len() {
        let mut support = vec![i];
        support.extend(
            graph
                .neighbors(i)
                .iter()
                .zip(factors.b(i))
                .filter(|(_, b)| **b != 0.0)
                .map(|(&j, _)| j),
        );
        for (a, &x) in support.iter().enumerate() {
            for &y in &support[a + 1..] {
                pairs.insert((x.max(y), x.min(y)));
            }
        }
    }
    PrecisionSparsity {
        diagonal: graph.len(),
        off_diagonal: pairs.len(),
    }
}

/// Structurally nonzero strictly-lower-triangular entries of the precision;
/// bounded by `sum_i C(|N(i)| + 1, 2) <= n m (m + 1) / 2`.
pub fn sparse_precision_nnz(factors: &NngpFactors, graph: &NeighborGraph) -> usize {
    precision_sparsity(factors, graph).off_diagonal
}

/// Dense `(I - B)' F^-1 (I - B)`, for small diagnostics.
pub fn assemble_precision(factors: &NngpFactors, graph: &NeighborGraph) -> DMatrix<f64> {
    let n = graph.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (&j, b) in graph.neighbors(i).iter().zip(factors.b(i)) {
            a[(i, j)] -= b;
        }
    }
    let finv = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 1.0 / factors.f(i)));
    a.transpose() * finv * a
}
