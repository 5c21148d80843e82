//! Forward simulation of multi-fidelity data sets.

use std::collections::{HashMap, HashSet};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{cholesky_with_jitter, cross_cov, KernelParams};
use crate::geometry::{FidelityDataset, Location, NeighborGraph, SiteKey};
use crate::model::{dot, BasisSpec, LevelParams};
use crate::nngp::{sample_nngp_prior, NngpFactors};
use crate::rng::{std_normal, substream};
use crate::{Error, Result};

/// True parameter values, one entry per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub tau2: Vec<f64>,
}

impl TruthSpec {
    /// The two-level configuration of the reference simulation study.
    pub fn reference() -> Self {
        TruthSpec {
            beta: vec![vec![10.0], vec![1.0]],
            gamma: vec![vec![], vec![1.0]],
            sigma2: vec![4.0, 1.0],
            phi: vec![vec![0.1, 0.1], vec![0.1, 0.1]],
            tau2: vec![0.1, 0.05],
        }
    }

    /// Parameters without positivity checks: zero variances are allowed here.
    pub fn params(&self) -> Result<Vec<LevelParams>> {
        let t = self.sigma2.len();
        for (what, len) in [
            ("truth.beta", self.beta.len()),
            ("truth.gamma", self.gamma.len()),
            ("truth.phi", self.phi.len()),
            ("truth.tau2", self.tau2.len()),
        ] {
            if len != t {
                return Err(Error::LengthMismatch {
                    what,
                    expected: t,
                    found: len,
                });
            }
        }
        Ok((0..t)
            .map(|i| LevelParams {
                beta: self.beta[i].clone(),
                gamma: self.gamma[i].clone(),
                kernel: KernelParams {
                    sigma2: self.sigma2[i],
                    phi: self.phi[i].clone(),
                },
                tau2: self.tau2[i],
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutSpec {
    /// Level whose points inside the boxes become test data (1-based).
    pub level: usize,
    /// Axis-aligned boxes, one `[lo, hi]` pair per coordinate.
    pub boxes: Vec<Vec<[f64; 2]>>,
}

impl HoldoutSpec {
    /// Two squares covering a fifth of each side, at `[0.2, 0.4]` and
    /// `[0.6, 0.8]` of the domain.
    pub fn reference(bbox: &[[f64; 2]], level: usize) -> Self {
        let frac = |a: f64, b: f64| -> Vec<[f64; 2]> {
            bbox.iter()
                .map(|[lo, hi]| [lo + a * (hi - lo), lo + b * (hi - lo)])
                .collect()
        };
        HoldoutSpec {
            level,
            boxes: vec![frac(0.2, 0.4), frac(0.6, 0.8)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Points per level.
    pub n: Vec<usize>,
    /// `[lo, hi]` per coordinate.
    #[serde(default = "unit_square")]
    pub bbox: Vec<[f64; 2]>,
    /// Fraction of each level's sites copied from the level below; 0 keeps
    /// the levels disjoint.
    #[serde(default)]
    pub shared_fraction: f64,
    /// Largest field drawn by dense Cholesky.
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
    /// Allow nearest-neighbor generation above `dense_cap`.
    #[serde(default = "default_true")]
    pub sequential: bool,
    /// Neighbors used by nearest-neighbor generation.
    #[serde(default = "default_approx_m")]
    pub approx_m: usize,
    pub truth: TruthSpec,
    /// Test-set boxes; none by default.
    #[serde(default)]
    pub holdout: Option<HoldoutSpec>,
    #[serde(default)]
    pub basis: Vec<BasisSpec>,
}

fn unit_square() -> Vec<[f64; 2]> {
    vec![[0.0, 1.0], [0.0, 1.0]]
}

fn default_dense_cap() -> usize {
    2000
}

fn default_approx_m() -> usize {
    20
}

fn default_true() -> bool {
    true
}

impl SynthConfig {
    /// Reference truths at the given per-level sizes, with the reference
    /// holdout at the top level.
    pub fn reference(n: Vec<usize>, seed: u64) -> Self {
        let n_levels = n.len();
        SynthConfig {
            seed,
            n,
            bbox: unit_square(),
            shared_fraction: 0.0,
            dense_cap: default_dense_cap(),
            sequential: true,
            approx_m: default_approx_m(),
            truth: TruthSpec::reference(),
            holdout: Some(HoldoutSpec::reference(&unit_square(), n_levels)),
            basis: Vec::new(),
        }
    }

    /// The configured holdout; without one nothing is held out.
    pub fn holdout_spec(&self) -> HoldoutSpec {
        self.holdout.clone().unwrap_or(HoldoutSpec {
            level: self.n.len(),
            boxes: Vec::new(),
        })
    }

    fn bases(&self) -> Result<Vec<BasisSpec>> {
        let t = self.n.len();
        match self.basis.len() {
            0 => Ok(vec![BasisSpec::default(); t]),
            1 => Ok(vec![self.basis[0]; t]),
            n if n == t => Ok(self.basis.clone()),
            n => Err(Error::LengthMismatch {
                what: "basis list",
                expected: t,
                found: n,
            }),
        }
    }

    pub fn validate(&self) -> Result<Vec<LevelParams>> {
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::invalid("every level needs at least one point"));
        }
        let dim = self.bbox.len();
        if dim == 0 || self.bbox.iter().any(|[lo, hi]| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid("bbox must give lo < hi for every coordinate"));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::invalid("shared_fraction must lie in [0, 1]"));
        }
        if self.approx_m == 0 {
            return Err(Error::invalid("approx_m must be at least 1"));
        }
        let params = self.truth.params()?;
        if params.len() != self.n.len() {
            return Err(Error::LengthMismatch {
                what: "truth levels",
                expected: self.n.len(),
                found: params.len(),
            });
        }
        let bases = self.bases()?;
        for (t, p) in params.iter().enumerate() {
            let level = t + 1;
            if p.kernel.phi.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.kernel.phi.len(),
                });
            }
            if p.kernel.phi.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
                return Err(Error::invalid(format!("level {level}: phi must be positive")));
            }
            if !(p.kernel.sigma2 >= 0.0) || !(p.tau2 >= 0.0) {
                return Err(Error::invalid(format!("level {level}: variances must be non-negative")));
            }
            if p.beta.len() != bases[t].trend.size(dim) {
                return Err(Error::LengthMismatch {
                    what: "truth.beta",
                    expected: bases[t].trend.size(dim),
                    found: p.beta.len(),
                });
            }
            let q = if t == 0 { 0 } else { bases[t].scale.size(dim) };
            if p.gamma.len() != q {
                return Err(Error::LengthMismatch {
                    what: "truth.gamma",
                    expected: q,
                    found: p.gamma.len(),
                });
            }
        }
        let h = self.holdout_spec();
        if h.level == 0 || h.level > self.n.len() {
            return Err(Error::invalid(format!("holdout level {} outside 1..={}", h.level, self.n.len())));
        }
        for b in &h.boxes {
            let inside = b.len() == dim
                && b.iter()
                    .zip(&self.bbox)
                    .all(|([lo, hi], [blo, bhi])| lo <= hi && lo >= blo && hi <= bhi);
            if !inside {
                return Err(Error::invalid("holdout boxes must lie inside bbox"));
            }
        }
        Ok(params)
    }
}

/// Held-out responses at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub level: usize,
    pub locations: Vec<Location>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthOutput {
    pub train: Vec<FidelityDataset>,
    pub test: TestSet,
    pub truth: Vec<LevelParams>,
    /// True when some field was drawn by nearest-neighbor generation.
    pub approximate: bool,
}

fn fresh_point<R: Rng>(rng: &mut R, bbox: &[[f64; 2]]) -> Location {
    let c = bbox.iter().map(|[lo, hi]| lo + (hi - lo) * rng.random::<f64>()).collect();
    Location::new(c).expect("finite bbox")
}

/// Draws a zero-mean field with the given kernel at `sites`.
fn draw_field<R: Rng>(
    sites: &[Location],
    kernel: &KernelParams,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, bool)> {
    if kernel.sigma2 == 0.0 {
        return Ok((vec![0.0; sites.len()], false));
    }
    if sites.len() <= config.dense_cap {
        let c = cross_cov(sites, sites, kernel)?;
        let chol = cholesky_with_jitter(c, kernel.sigma2, 0)?;
        let eps = DVector::from_fn(sites.len(), |_, _| std_normal(rng));
        return Ok(((chol.l() * eps).as_slice().to_vec(), false));
    }
    if !config.sequential {
        return Err(Error::SizeCap {
            size: sites.len(),
            cap: config.dense_cap,
        });
    }
    let graph = NeighborGraph::build(sites, config.approx_m)?;
    let factors = NngpFactors::compute(&graph, sites, kernel)?;
    Ok((sample_nngp_prior(&factors, &graph, rng), true))
}

pub fn simulate(config: &SynthConfig) -> Result<SynthOutput> {
    let params = config.validate()?;
    let bases = config.bases()?;
    let t_max = config.n.len();

    // Locations: fresh uniform points distinct from every earlier site, plus
    // an optional share copied from the level below.
    let mut taken: HashSet<SiteKey> = HashSet::new();
    let mut levels: Vec<Vec<Location>> = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut rng = substream(config.seed, 100 + t as u64);
        let n = config.n[t];
        let mut sites = Vec::with_capacity(n);
        if t > 0 {
            let shared = ((config.shared_fraction * n as f64).round() as usize).min(levels[t - 1].len());
            let below = &levels[t - 1];
            let mut idx: Vec<usize> = (0..below.len()).collect();
            for i in 0..shared {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
                sites.push(below[idx[i]].clone());
            }
        }
        while sites.len() < n {
            let p = fresh_point(&mut rng, &config.bbox);
            if taken.insert(p.key()) {
                sites.push(p);
            }
        }
        levels.push(sites);
    }

    // Union of each level's sites with all higher levels.
    let mut unions: Vec<Vec<Location>> = vec![Vec::new(); t_max];
    for t in (0..t_max).rev() {
        let mut seen: HashSet<SiteKey> = HashSet::new();
        let mut u = Vec::new();
        for l in t..t_max {
            for s in &levels[l] {
                if seen.insert(s.key()) {
                    u.push(s.clone());
                }
            }
        }
        unions[t] = u;
    }

    let mut approximate = false;
    let mut y_prev: HashMap<SiteKey, f64> = HashMap::new();
    let mut train = Vec::with_capacity(t_max);
    let holdout = config.holdout_spec();
    let mut test = TestSet {
        level: holdout.level,
        locations: Vec::new(),
        values: Vec::new(),
    };
    for t in 0..t_max {
        let mut rng = substream(config.seed, 200 + t as u64);
        let (w, approx) = draw_field(&unions[t], &params[t].kernel, config, &mut rng)?;
        approximate |= approx;
        let y: HashMap<SiteKey, f64> = unions[t]
            .iter()
            .zip(&w)
            .map(|(s, w)| {
                let c = s.coords();
                let below = if t == 0 {
                    0.0
                } else {
                    dot(&bases[t].scale.eval(c), &params[t].gamma) * y_prev[&s.key()]
                };
                (s.key(), below + dot(&bases[t].trend.eval(c), &params[t].beta) + w)
            })
            .collect();

        let mut noise = substream(config.seed, 300 + t as u64);
        let sd = params[t].tau2.sqrt();
        let mut locs = Vec::new();
        let mut values = Vec::new();
        for s in &levels[t] {
            let z = y[&s.key()] + sd * std_normal(&mut noise);
            let held = t + 1 == holdout.level
                && holdout.boxes.iter().any(|b| {
                    s.coords().iter().zip(b).all(|(x, [lo, hi])| *x >= *lo && *x <= *hi)
                });
            if held {
                test.locations.push(s.clone());
                test.values.push(z);
            } else {
                locs.push(s.clone());
                values.push(z);
            }
        }
        if locs.is_empty() {
            return Err(Error::invalid(format!("level {}: every point fell inside a holdout box", t + 1)));
        }
        train.push(FidelityDataset::new(t + 1, locs, values)?);
        y_prev = y;
    }
    Ok(SynthOutput {
        train,
        test,
        truth: params,
        approximate,
    })
}
