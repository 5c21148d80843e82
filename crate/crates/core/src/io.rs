//! CSV input and output.
//!
//! Data files have coordinate columns followed by `value`; coordinates are
//! named `x,y` in two dimensions and `x1..xd` otherwise.

use std::path::Path;

use crate::geometry::{DuplicatePolicy, FidelityDataset, Location};
use crate::predict::PredictionResult;
use crate::sampler::ChainTrace;
use crate::{Error, Result};

pub fn coord_names(dim: usize) -> Vec<String> {
    if dim == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect()
    }
}

fn input_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Input {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn column(&self, path: &Path, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| input_err(path, format!("missing column '{name}'")))
    }

    /// Indices of the coordinate columns (`x,y` or `x1..xd`).
    fn coord_columns(&self, path: &Path) -> Result<Vec<usize>> {
        let numbered: Vec<usize> = (1..)
            .map(|i| format!("x{i}"))
            .map_while(|n| self.header.iter().position(|h| *h == n))
            .collect();
        if !numbered.is_empty() {
            return Ok(numbered);
        }
        Ok(vec![self.column(path, "x")?, self.column(path, "y")?])
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_err(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| input_err(path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| input_err(path, e.to_string()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| {
                    input_err(
                        path,
                        format!("row {}: column '{}' is not a number: '{f}'", i + 1, header[j]),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn locations(path: &Path, table: &Table, cols: &[usize]) -> Result<Vec<Location>> {
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Location::new(cols.iter().map(|&c| r[c]).collect())
                .map_err(|_| input_err(path, format!("row {}: non-finite coordinate", i + 1)))
        })
        .collect()
}

/// Reads locations and responses; `policy` handles repeated locations.
pub fn read_dataset(path: &Path, level: usize, policy: DuplicatePolicy) -> Result<FidelityDataset> {
    let (locs, values) = read_points(path)?;
    FidelityDataset::with_policy(level, locs, values, policy).map_err(|e| input_err(path, e.to_string()))
}

/// Locations and the `value` column of a data file.
pub fn read_points(path: &Path) -> Result<(Vec<Location>, Vec<f64>)> {
    let t = read_table(path)?;
    let cols = t.coord_columns(path)?;
    let v = t.column(path, "value")?;
    let locs = locations(path, &t, &cols)?;
    if locs.is_empty() {
        return Err(input_err(path, "no data rows"));
    }
    Ok((locs, t.rows.iter().map(|r| r[v]).collect()))
}

/// Coordinates of a target file; any other columns are ignored.
pub fn read_locations(path: &Path) -> Result<Vec<Location>> {
    let t = read_table(path)?;
    let cols = t.coord_columns(path)?;
    locations(path, &t, &cols)
}

/// Columns of a prediction file needed for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub locations: Vec<Location>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionTable> {
    let t = read_table(path)?;
    let cols = t.coord_columns(path)?;
    let (m, lo, hi) = (
        t.column(path, "mean")?,
        t.column(path, "q025")?,
        t.column(path, "q975")?,
    );
    Ok(PredictionTable {
        locations: locations(path, &t, &cols)?,
        mean: t.rows.iter().map(|r| r[m]).collect(),
        lo: t.rows.iter().map(|r| r[lo]).collect(),
        hi: t.rows.iter().map(|r| r[hi]).collect(),
    })
}

pub fn write_points(path: &Path, locs: &[Location], values: &[f64]) -> Result<()> {
    let dim = locs.first().map_or(2, Location::dim);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = coord_names(dim);
    header.push("value".into());
    w.write_record(&header)?;
    for (l, v) in locs.iter().zip(values) {
        let rec: Vec<String> = l.coords().iter().chain([v]).map(f64::to_string).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, d: &FidelityDataset) -> Result<()> {
    write_points(path, d.locations(), d.values())
}

/// Column name of a quantile: `0.025 -> q025`.
pub fn quantile_name(p: f64) -> String {
    format!("q{:03}", (p * 1000.0).round() as u64)
}

pub fn write_predictions(path: &Path, r: &PredictionResult) -> Result<()> {
    let dim = r.targets.first().map_or(2, Location::dim);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = coord_names(dim);
    header.extend(["mean".to_string(), "sd".to_string()]);
    header.extend(r.probs.iter().map(|p| quantile_name(*p)));
    w.write_record(&header)?;
    for (l, s) in r.targets.iter().zip(&r.summaries) {
        let rec: Vec<String> = l
            .coords()
            .iter()
            .chain([&s.mean, &s.sd])
            .chain(&s.quantiles)
            .map(f64::to_string)
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Parameter trace of level `t` (0-based):
/// `iter,beta1..,gamma1..,sigma2,phi1..,tau2`.
pub fn write_trace(path: &Path, trace: &ChainTrace, t: usize) -> Result<()> {
    let first = &trace.draws.first().ok_or(Error::EmptyTrace)?.params[t];
    let mut header = vec!["iter".to_string()];
    header.extend((1..=first.beta.len()).map(|i| format!("beta{i}")));
    header.extend((1..=first.gamma.len()).map(|i| format!("gamma{i}")));
    header.push("sigma2".into());
    header.extend((1..=first.kernel.phi.len()).map(|i| format!("phi{i}")));
    header.push("tau2".into());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for d in &trace.draws {
        let p = &d.params[t];
        let mut rec = vec![d.iter.to_string()];
        rec.extend(
            p.beta
                .iter()
                .chain(&p.gamma)
                .chain([&p.kernel.sigma2])
                .chain(&p.kernel.phi)
                .chain([&p.tau2])
                .map(f64::to_string),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let locs = vec![
            Location::new(vec![0.1, 0.2]).unwrap(),
            Location::new(vec![0.3, 1.0 / 3.0]).unwrap(),
        ];
        write_points(&p, &locs, &[1.5, -2.25]).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("x,y,value\n"));
        let d = read_dataset(&p, 1, DuplicatePolicy::Reject).unwrap();
        assert_eq!(d.locations(), &locs[..]);
        assert_eq!(d.values(), &[1.5, -2.25]);
    }

    #[test]
    fn general_dimension_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let locs = vec![Location::new(vec![0.1, 0.2, 0.3]).unwrap()];
        write_points(&p, &locs, &[1.0]).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("x1,x2,x3,value\n"));
        assert_eq!(read_locations(&p).unwrap(), locs);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "x,y,val\n0,0,1\n").unwrap();
        let err = read_dataset(&p, 1, DuplicatePolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("missing column 'value'"));
        fs::write(&p, "x,y,value\n0,abc,1\n").unwrap();
        let err = read_dataset(&p, 1, DuplicatePolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn quantile_names() {
        assert_eq!(quantile_name(0.025), "q025");
        assert_eq!(quantile_name(0.975), "q975");
        assert_eq!(quantile_name(0.5), "q500");
    }
}
