use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, DatasetBuilder};
use crate::error::{Error, Result};

/// Column mapping for CSV ingestion.
///
/// When `covariates` is `None`, every column not claimed by one of the
/// structural fields is read as a covariate, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub patient_id: String,
    pub start: String,
    pub end: String,
    pub at_risk: String,
    pub visit: String,
    pub outcome: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            patient_id: "patient_id".into(),
            start: "start".into(),
            end: "end".into(),
            at_risk: "at_risk".into(),
            visit: "visit".into(),
            outcome: "outcome".into(),
            covariates: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let structural = [
        &schema.patient_id,
        &schema.start,
        &schema.end,
        &schema.at_risk,
        &schema.visit,
        &schema.outcome,
    ];
    let idx: Vec<usize> = structural.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .filter(|h| !structural.iter().any(|s| s.as_str() == h.as_str()))
            .cloned()
            .collect(),
    };
    let cov_idx: Vec<usize> = covariate_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let mut builder = DatasetBuilder::new(covariate_names);
    let mut covs = vec![0.0; cov_idx.len()];
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |j: usize| record.get(j).unwrap_or("").trim();
        let parse_f64 = |j: usize| -> Result<f64> {
            let raw = field(j);
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: headers[j].clone(),
                value: raw.to_string(),
            })
        };
        let parse_bool = |j: usize| -> Result<bool> {
            match field(j) {
                "0" => Ok(false),
                "1" => Ok(true),
                raw => Err(Error::Parse {
                    row,
                    column: headers[j].clone(),
                    value: raw.to_string(),
                }),
            }
        };
        let id_raw = field(idx[0]);
        let patient_id = id_raw.parse::<i64>().map_err(|_| Error::Parse {
            row,
            column: headers[idx[0]].clone(),
            value: id_raw.to_string(),
        })?;
        let start = parse_f64(idx[1])?;
        let end = parse_f64(idx[2])?;
        let at_risk = parse_bool(idx[3])?;
        let visit = parse_bool(idx[4])?;
        let outcome = if field(idx[5]).is_empty() {
            None
        } else {
            Some(parse_f64(idx[5])?)
        };
        for (slot, &j) in covs.iter_mut().zip(&cov_idx) {
            *slot = parse_f64(j)?;
        }
        builder
            .push(patient_id, start, end, at_risk, visit, outcome, &covs)
            .map_err(|e| match e {
                Error::Validation { message, .. } => Error::Validation { row, message },
                other => other,
            })?;
    }
    builder.build()
}

pub fn export_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(dataset, file)
}

/// Writes the canonical column order
/// `patient_id,start,end,at_risk,visit,outcome,<covariates...>`.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        "patient_id".to_string(),
        "start".into(),
        "end".into(),
        "at_risk".into(),
        "visit".into(),
        "outcome".into(),
    ];
    header.extend(dataset.covariate_names().iter().cloned());
    wtr.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for r in 0..dataset.len() {
        let iv = dataset.interval(r);
        fields.clear();
        fields.push(iv.patient_id.to_string());
        fields.push(iv.start.to_string());
        fields.push(iv.end.to_string());
        fields.push(u8::from(iv.at_risk).to_string());
        fields.push(u8::from(iv.visit).to_string());
        fields.push(iv.outcome.map(|y| y.to_string()).unwrap_or_default());
        fields.extend(dataset.covariates_of(r).iter().map(|v| v.to_string()));
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}
