use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

const FIXED_COLUMNS: [&str; 4] = ["id", "speaker", "age", "label"];

/// A loaded table plus how many rows were skipped for a missing or
/// unparseable age or label.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub matrix: FeatureMatrix,
    pub dropped_rows: usize,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        source_name: path.display().to_string(),
        message: message.into(),
    }
}

fn parse_label(cell: &str) -> Option<u8> {
    match cell.trim() {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

/// Reads `id,speaker,age,label,<features...>`.
pub fn load_csv(path: &Path) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => format_err(path, format!("{other:?}")),
        })?;
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() <= FIXED_COLUMNS.len() || names[..4] != FIXED_COLUMNS {
        return Err(format_err(
            path,
            "header must be id,speaker,age,label followed by at least one feature",
        ));
    }
    let feature_names: Vec<String> = names[4..].iter().map(|s| s.to_string()).collect();
    let d = feature_names.len();

    let mut ids = Vec::new();
    let mut speakers = Vec::new();
    let mut ages = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dropped = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| format_err(path, format!("row {row}: {e}")))?;
        let age = record[2]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|a| a.is_finite());
        let label = parse_label(&record[3]);
        let (Some(age), Some(label)) = (age, label) else {
            dropped += 1;
            continue;
        };
        for (j, cell) in record.iter().skip(4).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                format_err(
                    path,
                    format!("row {row}, column {}: {cell:?} is not a number", j + 5),
                )
            })?;
            if !v.is_finite() {
                return Err(format_err(
                    path,
                    format!("row {row}, column {}: non-finite value", j + 5),
                ));
            }
            data.push(v);
        }
        ids.push(record[0].to_string());
        speakers.push(record[1].to_string());
        ages.push(age);
        labels.push(label);
    }
    let features = Tensor2::from_vec(ids.len(), d, data)?;
    let matrix = FeatureMatrix::new(ids, speakers, ages, labels, features, feature_names)?;
    Ok(LoadReport {
        matrix,
        dropped_rows: dropped,
    })
}

/// Writes the table in the format `load_csv` reads. Reals use the shortest
/// representation that parses back to the same bits.
pub fn save_csv(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(m.feature_names.iter().map(String::as_str));
    writer.write_record(&header)?;
    for i in 0..m.len() {
        let mut row = vec![
            m.ids[i].clone(),
            m.speakers[i].clone(),
            m.ages[i].to_string(),
            m.labels[i].to_string(),
        ];
        row.extend(m.features.row(i).iter().map(f64::to_string));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
