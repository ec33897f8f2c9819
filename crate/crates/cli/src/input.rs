//! Reader for the `y,var,x1,...,xk` estimation file.

use std::fs::File;
use std::path::Path;

use hetshrink::{DesignMatrix, HeteroData};
use nalgebra::{DMatrix, DVector};

use crate::CliError;

pub fn read_units(path: &Path, intercept: bool) -> Result<HeteroData, CliError> {
    let file = File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::usage(format!("line 1: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 2 || header[0] != "y" || header[1] != "var" {
        return Err(CliError::usage("line 1: header must start with 'y,var'"));
    }
    for (j, name) in header.iter().enumerate().skip(2) {
        if *name != format!("x{}", j - 1) {
            return Err(CliError::usage(format!("line 1: expected column 'x{}', got '{name}'", j - 1)));
        }
    }
    let width = header.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut problems = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {}: {e}", e.position().map_or(0, |p| p.line())));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            problems.push(format!("line {line}: expected {width} fields, got {}", record.len()));
            continue;
        }
        let parsed: Result<Vec<f64>, String> = record
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("'{f}' is not a finite number"))
            })
            .collect();
        match parsed {
            Ok(v) if v[1] > 0.0 => rows.push(v),
            Ok(_) => problems.push(format!("line {line}: var must be positive")),
            Err(msg) => problems.push(format!("line {line}: {msg}")),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::usage(format!("malformed input\n{}", problems.join("\n"))));
    }
    if rows.is_empty() {
        return Err(CliError::usage("input has no data rows"));
    }
    let p = rows.len();
    let covs = width - 2;
    let k = covs + usize::from(intercept);
    if k == 0 {
        return Err(CliError::usage("no covariates and no intercept"));
    }
    let x = DMatrix::from_fn(k, p, |j, i| match (intercept, j) {
        (true, 0) => 1.0,
        (true, j) => rows[i][j + 1],
        (false, j) => rows[i][j + 2],
    });
    let y = DVector::from_fn(p, |i, _| rows[i][0]);
    let a = DVector::from_fn(p, |i, _| rows[i][1]);
    let x = DesignMatrix::new(x).map_err(CliError::from)?;
    HeteroData::new(y, a, x).map_err(CliError::from)
}
