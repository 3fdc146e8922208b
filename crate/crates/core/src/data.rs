//! Units, datasets and CSV ingestion.
//!
//! Row order of the input file defines the unit index used by every other
//! module, so solver runs are reproducible for a given file.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed unit: treatment flag, outcome and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub treated: bool,
    pub y: f64,
    pub x: Vec<f64>,
}

/// An immutable, validated sample of units sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    units: Vec<Unit>,
    d: usize,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with default covariate names `x1..xd`.
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        let d = units.first().map(|u| u.x.len()).unwrap_or(0);
        let names = (1..=d).map(|k| format!("x{k}")).collect();
        Self::with_names(units, names)
    }

    pub fn with_names(units: Vec<Unit>, covariate_names: Vec<String>) -> Result<Self> {
        let d = covariate_names.len();
        let mut seen = HashSet::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            let row = i + 1;
            if u.x.len() != d {
                return Err(Error::Row {
                    row,
                    message: format!("expected {d} covariates, found {}", u.x.len()),
                });
            }
            if !u.y.is_finite() {
                return Err(Error::Row { row, message: "outcome is not finite".into() });
            }
            if let Some(k) = u.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Row {
                    row,
                    message: format!("covariate {} is not finite", covariate_names[k]),
                });
            }
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Row { row, message: format!("duplicate id '{}'", u.id) });
            }
        }
        Ok(Self { units, d, covariate_names })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Treatment flags in row order.
    pub fn arms(&self) -> Vec<bool> {
        self.units.iter().map(|u| u.treated).collect()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.units[i].treated).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.units[i].treated).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.y).collect()
    }

    /// Fails unless both arms are nonempty.
    pub fn require_both_arms(&self) -> Result<()> {
        let t = self.units.iter().filter(|u| u.treated).count();
        if t == 0 {
            return Err(Error::EmptyArm("no treated units".into()));
        }
        if t == self.n() {
            return Err(Error::EmptyArm("no control units".into()));
        }
        Ok(())
    }
}

/// Reads a dataset from a CSV file with header `id,z,y,x1,...,xd`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    read_dataset(file)
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    for (pos, expected) in ["id", "z", "y"].iter().enumerate() {
        match cols.get(pos) {
            Some(c) if c == expected => {}
            Some(c) => {
                return Err(Error::Header(format!("column {} must be '{expected}', found '{c}'", pos + 1)))
            }
            None => return Err(Error::Header(format!("missing column '{expected}'"))),
        }
    }
    if cols.len() < 4 {
        return Err(Error::Header("at least one covariate column is required".into()));
    }
    let names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();

    let mut units = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, message: e.to_string() })?;
        if rec.len() != cols.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Row { row, message: "missing id".into() });
        }
        let treated = match &rec[1] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Row { row, message: format!("z must be 0 or 1, found '{other}'") })
            }
        };
        let y = parse_field(&rec[2], "y", row)?;
        let x = names
            .iter()
            .enumerate()
            .map(|(k, name)| parse_field(&rec[3 + k], name, row))
            .collect::<Result<Vec<_>>>()?;
        units.push(Unit { id, treated, y, x });
    }
    Dataset::with_names(units, names)
}

fn parse_field(raw: &str, name: &str, row: usize) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::Row { row, message: format!("missing value in column '{name}'") });
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::Row { row, message: format!("non-numeric value '{raw}' in column '{name}'") })?;
    if !v.is_finite() {
        return Err(Error::Row { row, message: format!("non-finite value '{raw}' in column '{name}'") });
    }
    Ok(v)
}

/// Writes the dataset in the input CSV schema. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "z".to_string(), "y".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for u in &ds.units {
        let mut rec = vec![u.id.clone(), if u.treated { "1" } else { "0" }.to_string(), u.y.to_string()];
        rec.extend(u.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

/// Arm counts and covariate means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub treated: usize,
    pub control: usize,
    pub treated_means: Vec<f64>,
    pub control_means: Vec<f64>,
    /// Treated mean minus control mean, per covariate. Zero for an empty arm.
    pub mean_difference: Vec<f64>,
}

pub fn summarize(ds: &Dataset) -> Summary {
    let d = ds.d();
    let mut sum_t = vec![0.0; d];
    let mut sum_c = vec![0.0; d];
    let (mut t, mut c) = (0usize, 0usize);
    for u in ds.units() {
        let acc = if u.treated {
            t += 1;
            &mut sum_t
        } else {
            c += 1;
            &mut sum_c
        };
        for (a, v) in acc.iter_mut().zip(&u.x) {
            *a += v;
        }
    }
    let mean = |s: Vec<f64>, k: usize| -> Vec<f64> {
        if k == 0 {
            vec![0.0; d]
        } else {
            s.into_iter().map(|v| v / k as f64).collect()
        }
    };
    let treated_means = mean(sum_t, t);
    let control_means = mean(sum_c, c);
    let mean_difference = if t == 0 || c == 0 {
        vec![0.0; d]
    } else {
        treated_means.iter().zip(&control_means).map(|(a, b)| a - b).collect()
    };
    Summary { n: ds.n(), treated: t, control: c, treated_means, control_means, mean_difference }
}
