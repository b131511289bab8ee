use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::AppError;

/// A numeric table read from CSV.
pub struct Table {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Option<Vec<f64>>,
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, AppError> {
    let trimmed = cell.trim();
    trimmed.parse::<f64>().map_err(|_| {
        AppError::User(format!(
            "row {row}, column '{column}': cannot parse {trimmed:?} as a number"
        ))
    })
}

/// Reads a CSV with a header row. When `target` is set that column becomes
/// the response and every other column a covariate. When `columns` is set,
/// exactly those covariates are read, in that order.
pub fn read_table(path: &Path, target: Option<&str>, columns: Option<&[String]>) -> Result<Table, AppError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| AppError::User(format!("cannot open {}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| AppError::User(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = match target {
        Some(t) => Some(
            header
                .iter()
                .position(|h| h == t)
                .ok_or_else(|| AppError::User(format!("target column '{t}' not found in {}", path.display())))?,
        ),
        None => None,
    };
    let covariate_idx: Vec<usize> = match columns {
        Some(cols) => cols
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| AppError::User(format!("covariate column '{c}' not found in {}", path.display())))
            })
            .collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|i| Some(*i) != target_idx).collect(),
    };
    if covariate_idx.is_empty() {
        return Err(AppError::User("no covariate columns".into()));
    }

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| AppError::User(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(AppError::User(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        for &c in &covariate_idx {
            let v = parse_cell(&record[c], row, &header[c])?;
            if !v.is_finite() {
                return Err(AppError::User(format!("row {row}, column '{}': value is not finite", header[c])));
            }
            values.push(v);
        }
        if let Some(t) = target_idx {
            let v = parse_cell(&record[t], row, &header[t])?;
            if !v.is_finite() {
                return Err(AppError::User(format!("row {row}, column '{}': response is not finite", header[t])));
            }
            y.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(AppError::User(format!("{} has no data rows", path.display())));
    }
    Ok(Table {
        names: covariate_idx.iter().map(|&i| header[i].clone()).collect(),
        x: DMatrix::from_row_slice(rows, covariate_idx.len(), &values),
        y: target_idx.map(|_| y),
    })
}

pub fn write_table(path: &Path, names: &[String], x: &DMatrix<f64>, y: Option<(&str, &[f64])>) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::io(path, e.into()))?;
    let mut header: Vec<String> = names.to_vec();
    if let Some((name, _)) = y {
        header.push(name.to_string());
    }
    w.write_record(&header).map_err(|e| AppError::io(path, e.into()))?;
    for n in 0..x.nrows() {
        let mut rec: Vec<String> = x.row(n).iter().map(|v| v.to_string()).collect();
        if let Some((_, ys)) = y {
            rec.push(ys[n].to_string());
        }
        w.write_record(&rec).map_err(|e| AppError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| AppError::io(path, e.into()))?;
    out.write_all(b"\n").map_err(|e| AppError::io(path, e))?;
    out.flush().map_err(|e| AppError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let file = File::open(path).map_err(|e| AppError::User(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| AppError::User(format!("{}: invalid JSON: {e}", path.display())))
}

/// Reads a TOML or JSON config, chosen by extension.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::User(format!("cannot read {}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| AppError::User(format!("{}: invalid JSON: {e}", path.display()))),
        _ => toml::from_str(&text).map_err(|e| AppError::User(format!("{}: invalid TOML: {e}", path.display()))),
    }
}

/// File-name-safe form of a covariate name.
pub fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
