//! Dataset files: one CSV row per unit, or the JSON form of [`Dataset`].
//!
//! CSV columns are `cluster_id`, `unit_id`, `treatment`, `outcome` in any order; every other
//! column is a covariate, kept in file order. Row numbers in errors count data rows from 1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClusterSample, Dataset};
use crate::error::{Error, Result};

const FIXED: [&str; 4] = ["cluster_id", "unit_id", "treatment", "outcome"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Guesses from the file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

struct Unit {
    key: String,
    treatment: u8,
    outcome: f64,
    x: Vec<f64>,
}

fn number(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(row, column, format!("`{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(row, column, format!("`{field}` is not finite")));
    }
    Ok(v)
}

/// Numeric unit ids sort numerically, others lexicographically.
fn unit_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(0, "header", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(Error::parse(0, "", "no rows"));
    }
    let mut index = [0usize; 4];
    for (k, name) in FIXED.iter().enumerate() {
        index[k] = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(0, *name, "missing column"))?;
    }
    let covariates: Vec<usize> = (0..header.len()).filter(|j| !index.contains(j)).collect();
    let names: Vec<String> = covariates.iter().map(|&j| header[j].clone()).collect();

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Unit>> = HashMap::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::parse(row, "", e.to_string()))?;
        let cluster = record[index[0]].to_string();
        if cluster.is_empty() {
            return Err(Error::parse(row, "cluster_id", "empty cluster id"));
        }
        let treatment = match record[index[2]].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(row, "treatment", format!("`{other}` is not 0 or 1"))),
        };
        let outcome = number(&record[index[3]], row, "outcome")?;
        let x = covariates
            .iter()
            .map(|&j| number(&record[j], row, &header[j]))
            .collect::<Result<Vec<_>>>()?;
        let units = groups.entry(cluster.clone()).or_insert_with(|| {
            order.push(cluster.clone());
            Vec::new()
        });
        let key = record[index[1]].to_string();
        if units.iter().any(|u| u.key == key) {
            return Err(Error::parse(row, "unit_id", format!("duplicate unit `{key}` in cluster `{cluster}`")));
        }
        units.push(Unit {
            key,
            treatment,
            outcome,
            x,
        });
    }
    if order.is_empty() {
        return Err(Error::parse(0, "", "no rows"));
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let mut units = groups.remove(&id).unwrap_or_default();
            units.sort_by(|a, b| unit_order(&a.key, &b.key));
            let p = names.len();
            let mut flat = Vec::with_capacity(units.len() * p);
            let mut a = Vec::with_capacity(units.len());
            let mut y = Vec::with_capacity(units.len());
            for u in units {
                flat.extend(u.x);
                a.push(u.treatment);
                y.push(u.outcome);
            }
            ClusterSample::from_flat(id, flat, p, a, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::with_names(clusters, names)
}

/// Unit ids are written as within-cluster indices.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header).map_err(io)?;
    for c in data.clusters() {
        for i in 0..c.size() {
            let mut rec = vec![
                c.id().to_string(),
                i.to_string(),
                c.treatments()[i].to_string(),
                c.outcomes()[i].to_string(),
            ];
            rec.extend(c.covariate_row(i).iter().map(f64::to_string));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<R: Read>(reader: R) -> Result<Dataset> {
    serde_json::from_reader(reader).map_err(|e| Error::parse(e.line(), "", e.to_string()))
}

pub fn write_json<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    serde_json::to_writer_pretty(writer, data).map_err(|e| Error::Io(e.to_string()))
}

/// Reads a dataset; the format defaults to the one implied by the extension.
pub fn load_dataset(path: &Path, format: Option<DataFormat>) -> Result<Dataset> {
    let file = BufReader::new(File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?);
    match format.unwrap_or_else(|| DataFormat::from_path(path)) {
        DataFormat::Csv => read_csv(file),
        DataFormat::Json => read_json(file),
    }
}

pub fn save_dataset(data: &Dataset, path: &Path, format: Option<DataFormat>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    match format.unwrap_or_else(|| DataFormat::from_path(path)) {
        DataFormat::Csv => write_csv(data, &mut file)?,
        DataFormat::Json => write_json(data, &mut file)?,
    }
    file.flush()?;
    Ok(())
}
