//! Nearest neighbor co-kriging Gaussian process (NNCGP).
//!
//! A `T`-level autoregressive co-kriging model
//!
//! ```text
//! z_t(s) = y_t(s) + eps_t,            eps_t ~ N(0, tau_t^2)
//! y_t(s) = zeta_{t-1}(s) y_{t-1}(s) + h_t(s)' beta_t + w_t(s)
//! ```
//!
//! where every latent field `w_t` carries an independent nearest-neighbor GP
//! prior over an augmented reference set `S~_t = S_t u S_t*`. The augmentation
//! nests the reference sets across levels so the likelihood factorizes per
//! level and every parameter except the range `phi_t` has a conjugate update.
//!
//! Module map:
//!
//! * [`geometry`]: locations, ordering, augmentation, neighbor graphs.
//! * [`covariance`]: anisotropic exponential kernel.
//! * [`nngp`]: per-site conditional factors and the sparse log-density.
//! * [`oracle`]: dense exact co-kriging on small instances.
//! * [`model`]: parameters, priors, latent state and the joint density.
//! * [`sampler`]: Gibbs / Metropolis-Hastings chain.
//! * [`predict`]: posterior-predictive draws at new sites and on grids.
//! * [`synth`]: forward simulation of multi-fidelity data sets.
//! * [`metrics`]: RMSPE, NSME, interval coverage, DIC.
//! * [`baselines`]: single-level and combined NNGP comparators.

pub mod baselines;
pub mod covariance;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nngp;
pub mod oracle;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
