//! Anisotropic exponential kernel `sigma2 * exp(-0.5 * sum_i |d_i| / phi_i)`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::geometry::Location;
use crate::{Error, Result};

/// Relative diagonal jitter added on a failed Cholesky factorization.
pub const JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma2: f64,
    pub phi: Vec<f64>,
}

impl KernelParams {
    pub fn new(sigma2: f64, phi: Vec<f64>) -> Result<Self> {
        let p = KernelParams { sigma2, phi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.phi.is_empty() || self.phi.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::invalid(format!(
                "phi components must be positive and finite, got {:?}",
                self.phi
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }
}

/// Correlation `exp(-0.5 * sum_i |a_i - b_i| / phi_i)`; no dimension checks.
#[inline]
pub fn correlation(a: &[f64], b: &[f64], phi: &[f64]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(phi)
        .map(|((x, y), p)| (x - y).abs() / p)
        .sum();
    (-0.5 * s).exp()
}

pub fn kernel(s: &Location, s2: &Location, p: &KernelParams) -> Result<f64> {
    for l in [s, s2] {
        if l.dim() != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                found: l.dim(),
            });
        }
    }
    Ok(p.sigma2 * correlation(s.coords(), s2.coords(), &p.phi))
}

pub fn cross_cov(a: &[Location], b: &[Location], p: &KernelParams) -> Result<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyLocations);
    }
    let mut m = DMatrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            m[(i, j)] = kernel(x, y, p)?;
        }
    }
    Ok(m)
}

/// Cholesky factorization; on failure adds `JITTER * scale` to the diagonal
/// and retries once. `index` names the site reported on a second failure.
pub fn cholesky_with_jitter(
    mut m: DMatrix<f64>,
    scale: f64,
    index: usize,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let eps = JITTER * scale;
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    Cholesky::new(m).ok_or(Error::NotPositiveDefinite { index })
}
