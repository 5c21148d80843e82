//! TOML run configuration. Relative paths are resolved against the
//! directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nncgp::baselines::ModelKind;
use nncgp::geometry::{DuplicatePolicy, FidelityDataset};
use nncgp::io::read_dataset;
use nncgp::model::{BasisSpec, PriorSpec};
use nncgp::sampler::SamplerConfig;

use crate::UserError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelKind,
    /// One CSV per fidelity level, lowest first.
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub m: usize,
    #[serde(default)]
    pub duplicates: DuplicatePolicy,
    /// Empty, one entry shared by all levels, or one per level.
    #[serde(default)]
    pub basis: Vec<BasisSpec>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Raw bytes and hash of a config file, kept for the run manifest.
pub struct Loaded<T> {
    pub config: T,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Loaded<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
    let config: T = toml::from_str(&text)
        .map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))?;
    Ok(Loaded {
        config,
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Loaded<RunConfig>> {
        let mut loaded: Loaded<RunConfig> = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let c = &mut loaded.config;
        c.train = c.train.iter().map(|p| resolve(base, p)).collect();
        c.test = c.test.as_deref().map(|p| resolve(base, p));
        c.output = c.output.as_deref().map(|p| resolve(base, p));
        c.validate()?;
        Ok(loaded)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.m == 0 {
            bail!(UserError("m must be at least 1".into()));
        }
        if self.train.is_empty() {
            bail!(UserError("train lists no data files".into()));
        }
        for p in self.train.iter().chain(&self.test) {
            if !p.is_file() {
                bail!(UserError(format!("data file {} does not exist", p.display())));
            }
        }
        if self.model != ModelKind::Nncgp && self.basis.len() > 1 {
            bail!(UserError("baseline models take at most one basis entry".into()));
        }
        self.sampler.validate().map_err(|e| UserError(format!("sampler: {e}")))?;
        Ok(())
    }

    pub fn datasets(&self) -> anyhow::Result<Vec<FidelityDataset>> {
        self.train
            .iter()
            .enumerate()
            .map(|(t, p)| read_dataset(p, t + 1, self.duplicates).with_context(|| format!("level {}", t + 1)))
            .collect()
    }
}
