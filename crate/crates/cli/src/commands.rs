use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use nncgp::baselines::{combined_model, single_level_model, ModelKind};
use nncgp::geometry::{DuplicatePolicy, FidelityDataset, Location};
use nncgp::io::{read_dataset, read_locations, read_points, read_predictions, write_dataset, write_points, write_predictions, write_trace};
use nncgp::metrics::{dic, interval_metrics, nsme, rmspe, EvalReport};
use nncgp::model::{BasisSpec, LevelParams, Model};
use nncgp::oracle::{oracle_suite, OracleOptions};
use nncgp::predict::{grid_centers, predict as run_predict, PredictionRequest};
use nncgp::sampler::{ChainTrace, Progress, Sampler};
use nncgp::synth::{simulate as run_simulate, SynthConfig, TruthSpec};

use crate::config::{read_toml, RunConfig};
use crate::{PredictArgs, UserError};

const POSTERIOR: &str = "posterior.json";

#[derive(Serialize)]
struct TruthFile<'a> {
    seed: u64,
    n: &'a [usize],
    n_train: Vec<usize>,
    n_test: usize,
    test_level: usize,
    approximate: bool,
    truth: &'a TruthSpec,
    params: &'a [LevelParams],
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut c = read_toml::<SynthConfig>(config)?.config;
    if let Some(s) = seed {
        c.seed = s;
    }
    let data = run_simulate(&c)?;
    create_dir(out)?;
    for d in &data.train {
        write_dataset(&out.join(format!("train_level{}.csv", d.level())), d)?;
    }
    write_points(&out.join("test.csv"), &data.test.locations, &data.test.values)?;
    write_json(
        &out.join("truth.json"),
        &TruthFile {
            seed: c.seed,
            n: &c.n,
            n_train: data.train.iter().map(FidelityDataset::len).collect(),
            n_test: data.test.values.len(),
            test_level: data.test.level,
            approximate: data.approximate,
            truth: &c.truth,
            params: &data.truth,
        },
    )
}

/// Everything `predict` and `evaluate` need to rebuild a fitted model.
#[derive(Serialize, Deserialize)]
struct Posterior {
    model: ModelKind,
    m: usize,
    duplicates: DuplicatePolicy,
    basis: Vec<BasisSpec>,
    train: Vec<PathBuf>,
    trace: ChainTrace,
}

impl Posterior {
    fn load(dir: &Path) -> anyhow::Result<Posterior> {
        let path = dir.join(POSTERIOR);
        let text = fs::read_to_string(&path)
            .map_err(|e| UserError(format!("no fit found at {}: {e}", path.display())))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn model(&self) -> anyhow::Result<Model> {
        let data = self
            .train
            .iter()
            .enumerate()
            .map(|(t, p)| read_dataset(p, t + 1, self.duplicates))
            .collect::<nncgp::Result<Vec<_>>>()?;
        Ok(build_model(self.model, data, self.m, &self.basis)?)
    }
}

fn build_model(kind: ModelKind, data: Vec<FidelityDataset>, m: usize, basis: &[BasisSpec]) -> nncgp::Result<Model> {
    match kind {
        ModelKind::Nncgp => Model::new(data, m, basis),
        ModelKind::Single => single_level_model(&data, m, basis),
        ModelKind::Combined => combined_model(&data, m, basis),
    }
}

#[derive(Serialize)]
struct AcceptanceRow {
    level: usize,
    proposed: usize,
    accepted: usize,
    rate: f64,
    rate_after_burn_in: f64,
    final_step: f64,
    /// The joint `(sigma2, phi)` move; absent when it did not run.
    joint: Option<JointRow>,
}

#[derive(Serialize)]
struct JointRow {
    proposed: usize,
    rate_after_burn_in: f64,
    final_step: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    model: ModelKind,
    seed: u64,
    config: String,
    config_sha256: &'a str,
    levels: usize,
    m: usize,
    n_iter: usize,
    burn_in: usize,
    thin: usize,
    retained: usize,
}

pub fn fit(config: &Path, out: Option<&Path>, seed: Option<u64>, model: Option<ModelKind>) -> anyhow::Result<()> {
    let loaded = RunConfig::load(config)?;
    let mut c = loaded.config;
    if let Some(s) = seed {
        c.sampler.seed = s;
    }
    if let Some(k) = model {
        c.model = k;
    }
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| c.output.clone())
        .ok_or_else(|| UserError("no output directory: pass --out or set `output`".into()))?;
    let fitted = build_model(c.model, c.datasets()?, c.m, &c.basis)?;
    let priors = c.priors.expand(fitted.bases(), fitted.dim())?;
    let mut sampler = Sampler::new(&fitted, &priors, c.sampler.clone())?;
    let mut report = |p: &Progress| {
        let line = serde_json::json!({
            "iter": p.iter,
            "log_joint": p.log_joint,
            "acceptance": p.acceptance,
        });
        eprintln!("{line}");
    };
    let trace = sampler.run(Some(&mut report))?;

    create_dir(&dir)?;
    for t in 0..fitted.levels() {
        write_trace(&dir.join(format!("trace_level{}.csv", t + 1)), &trace, t)?;
    }
    let rows: Vec<AcceptanceRow> = trace
        .acceptance
        .iter()
        .enumerate()
        .map(|(t, a)| AcceptanceRow {
            level: t + 1,
            proposed: a.proposed,
            accepted: a.accepted,
            rate: a.rate(),
            rate_after_burn_in: a.kept_rate(),
            final_step: a.step,
            joint: trace.whitened.get(t).filter(|j| j.proposed > 0).map(|j| JointRow {
                proposed: j.proposed,
                rate_after_burn_in: j.kept_rate(),
                final_step: j.step,
            }),
        })
        .collect();
    write_json(&dir.join("acceptance.json"), &rows)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            version: env!("CARGO_PKG_VERSION"),
            model: c.model,
            seed: c.sampler.seed,
            config: loaded.path.display().to_string(),
            config_sha256: &loaded.sha256,
            levels: fitted.levels(),
            m: c.m,
            n_iter: c.sampler.n_iter,
            burn_in: c.sampler.burn_in,
            thin: c.sampler.thin,
            retained: trace.len(),
        },
    )?;
    let train = c
        .train
        .iter()
        .map(|p| fs::canonicalize(p).with_context(|| format!("resolving {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let posterior = Posterior {
        model: c.model,
        m: c.m,
        duplicates: c.duplicates,
        basis: c.basis,
        train,
        trace,
    };
    let text = serde_json::to_string(&posterior)?;
    fs::write(dir.join(POSTERIOR), text).with_context(|| format!("writing {}", dir.join(POSTERIOR).display()))
}

fn fit_dir(args: &PredictArgs) -> anyhow::Result<PathBuf> {
    if let Some(d) = &args.fit {
        return Ok(d.clone());
    }
    let config = args
        .config
        .as_deref()
        .ok_or_else(|| UserError("pass --fit or --config".into()))?;
    RunConfig::load(config)?
        .config
        .output
        .ok_or_else(|| anyhow!(UserError("config has no `output` directory".into())))
}

fn grid_targets(bounds: &[f64], cell: &[f64]) -> anyhow::Result<Vec<Location>> {
    if bounds.is_empty() || !bounds.len().is_multiple_of(2) {
        bail!(UserError("--grid takes lo,hi pairs, one per coordinate".into()));
    }
    let bbox: Vec<(f64, f64)> = bounds.chunks(2).map(|p| (p[0], p[1])).collect();
    let cell = if cell.len() == 1 {
        vec![cell[0]; bbox.len()]
    } else {
        cell.to_vec()
    };
    Ok(grid_centers(&bbox, &cell)?)
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let dir = fit_dir(args)?;
    let posterior = Posterior::load(&dir)?;
    let model = posterior.model()?;
    let targets = match (&args.targets, &args.grid, &args.cell) {
        (Some(path), _, _) => read_locations(path)?,
        (None, Some(bounds), Some(cell)) => grid_targets(bounds, cell)?,
        _ => bail!(UserError("pass --targets or --grid with --cell".into())),
    };
    let request = PredictionRequest {
        seed: args.seed,
        ..PredictionRequest::new(targets, args.level.unwrap_or(model.levels()))
    };
    let result = run_predict(&model, &posterior.trace, &request)?;
    let out = args.out.clone().unwrap_or_else(|| dir.join("predictions.csv"));
    write_predictions(&out, &result)?;
    Ok(())
}

pub fn evaluate(pred: &Path, test: &Path, fit: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let p = read_predictions(pred)?;
    let (locs, obs) = read_points(test)?;
    if p.locations != locs {
        bail!(UserError(format!(
            "{} and {} do not list the same locations in the same order",
            pred.display(),
            test.display()
        )));
    }
    let (cvg95, alci95) = interval_metrics(&p.lo, &p.hi, &obs)?;
    let mut report = EvalReport {
        rmspe: rmspe(&p.mean, &obs)?,
        nsme: nsme(&p.mean, &obs)?,
        cvg95,
        alci95,
        pd: None,
        dic: None,
        n_test: obs.len(),
    };
    if let Some(dir) = fit {
        let posterior = Posterior::load(dir)?;
        let (pd, value) = dic(&posterior.model()?, &posterior.trace)?;
        report.pd = Some(pd);
        report.dic = Some(value);
    }
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn oracle_check(sizes: Vec<usize>, seed: u64, inject_fault: bool) -> anyhow::Result<()> {
    if sizes.contains(&0) {
        bail!(UserError("sizes must be positive".into()));
    }
    let checks = oracle_suite(&OracleOptions {
        sizes,
        seed,
        inject_fault,
    })?;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} {}", c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} oracle checks failed", checks.len());
    }
    Ok(())
}
