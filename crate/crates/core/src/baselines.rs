//! Single-level and pooled comparators fitted with the `T = 1` sampler.

use crate::geometry::{DuplicatePolicy, FidelityDataset};
use crate::model::{BasisSpec, Model, Priors};
use crate::sampler::{run_chain, ChainTrace, SamplerConfig};
use crate::{Error, Result};

/// Which model a fit uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Nncgp,
    /// Highest-fidelity data only.
    Single,
    /// All levels pooled into one data set.
    Combined,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nncgp" => Ok(ModelKind::Nncgp),
            "single" => Ok(ModelKind::Single),
            "combined" => Ok(ModelKind::Combined),
            other => Err(Error::invalid(format!(
                "unknown model '{other}' (expected nncgp, single or combined)"
            ))),
        }
    }
}

fn first_basis(bases: &[BasisSpec]) -> Vec<BasisSpec> {
    bases.first().map(|b| vec![*b]).unwrap_or_default()
}

/// Level-1 priors, used by both comparators.
pub fn baseline_priors(priors: &Priors) -> Result<Priors> {
    let first = priors
        .levels
        .first()
        .ok_or_else(|| Error::invalid("priors hold no levels"))?;
    Ok(Priors {
        levels: vec![first.clone()],
    })
}

/// The top-level data as a one-level model.
pub fn single_level_model(datasets: &[FidelityDataset], m: usize, bases: &[BasisSpec]) -> Result<Model> {
    let top = datasets.last().ok_or(Error::EmptyLocations)?;
    let d = FidelityDataset::new(1, top.locations().to_vec(), top.values().to_vec())?;
    Model::new(vec![d], m, &first_basis(bases))
}

/// Every level concatenated into one level-1 data set. Sites shared across
/// levels are separated by the deterministic jitter policy.
pub fn combined_model(datasets: &[FidelityDataset], m: usize, bases: &[BasisSpec]) -> Result<Model> {
    if datasets.is_empty() {
        return Err(Error::EmptyLocations);
    }
    let locs = datasets.iter().flat_map(|d| d.locations().iter().cloned()).collect();
    let values = datasets.iter().flat_map(|d| d.values().iter().copied()).collect();
    let d = FidelityDataset::with_policy(1, locs, values, DuplicatePolicy::Jitter)?;
    Model::new(vec![d], m, &first_basis(bases))
}

pub fn fit_single_level(
    datasets: &[FidelityDataset],
    priors: &Priors,
    m: usize,
    bases: &[BasisSpec],
    config: &SamplerConfig,
) -> Result<(Model, ChainTrace)> {
    let model = single_level_model(datasets, m, bases)?;
    let trace = run_chain(&model, &baseline_priors(priors)?, config)?;
    Ok((model, trace))
}

pub fn fit_combined(
    datasets: &[FidelityDataset],
    priors: &Priors,
    m: usize,
    bases: &[BasisSpec],
    config: &SamplerConfig,
) -> Result<(Model, ChainTrace)> {
    let model = combined_model(datasets, m, bases)?;
    let trace = run_chain(&model, &baseline_priors(priors)?, config)?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Location;
    use crate::model::PriorSpec;

    fn ds(level: usize, pts: &[[f64; 2]]) -> FidelityDataset {
        let locs = pts.iter().map(|p| Location::new(p.to_vec()).unwrap()).collect();
        let z = (0..pts.len()).map(|i| i as f64).collect();
        FidelityDataset::new(level, locs, z).unwrap()
    }

    fn data() -> Vec<FidelityDataset> {
        vec![
            ds(1, &[[0.1, 0.1], [0.5, 0.2], [0.3, 0.9]]),
            ds(2, &[[0.5, 0.2], [0.8, 0.8]]),
        ]
    }

    fn config() -> SamplerConfig {
        SamplerConfig {
            n_iter: 20,
            burn_in: 5,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn combined_preserves_counts_and_separates_shared_sites() {
        let model = combined_model(&data(), 3, &[]).unwrap();
        assert_eq!(model.datasets()[0].len(), 5);
        assert_eq!(model.levels(), 1);
    }

    #[test]
    fn single_level_equals_one_level_model() {
        let priors = PriorSpec::default().expand(&[BasisSpec::default(); 2], 2).unwrap();
        let (_, a) = fit_single_level(&data(), &priors, 3, &[], &config()).unwrap();
        let top = ds(1, &[[0.5, 0.2], [0.8, 0.8]]);
        let model = Model::new(vec![top], 3, &[]).unwrap();
        let b = run_chain(&model, &baseline_priors(&priors).unwrap(), &config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn combined_of_one_level_equals_single() {
        let priors = PriorSpec::default().expand(&[BasisSpec::default()], 2).unwrap();
        let one = vec![ds(1, &[[0.1, 0.1], [0.5, 0.2], [0.3, 0.9]])];
        let (_, a) = fit_single_level(&one, &priors, 2, &[], &config()).unwrap();
        let (_, b) = fit_combined(&one, &priors, 2, &[], &config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_kind_parsing() {
        assert_eq!("combined".parse::<ModelKind>().unwrap(), ModelKind::Combined);
        assert!("foo".parse::<ModelKind>().is_err());
    }
}
