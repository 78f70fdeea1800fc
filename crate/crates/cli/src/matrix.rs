//! Dense matrices as header-less CSV: one row per line, comma-separated.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::CliError;

pub fn parse_matrix(text: &str, source: &str) -> Result<Array2<f64>, CliError> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (li, line) in text.lines().enumerate() {
        let line_no = li + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        let mut col = 1;
        for field in line.split(',') {
            let token = field.trim();
            let lead = field.len() - field.trim_start().len();
            let v: f64 = token.parse().map_err(|_| {
                CliError::Input(format!(
                    "{source}:{line_no}:{}: cannot parse `{token}` as a number",
                    col + lead
                ))
            })?;
            values.push(v);
            count += 1;
            col += field.chars().count() + 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(CliError::Input(format!(
                    "{source}:{line_no}:1: expected {w} values per row, found {count}"
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| CliError::Input(format!("{source}:1:1: matrix is empty")))?;
    Ok(Array2::from_shape_vec((rows, width), values).expect("rectangular by construction"))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_matrix(&text, &path.display().to_string())
}

/// Flattens a single row or single column into a weight vector.
pub fn read_vector(path: &Path) -> Result<Vec<f64>, CliError> {
    let m = read_matrix(path)?;
    if m.nrows() != 1 && m.ncols() != 1 {
        return Err(CliError::Input(format!(
            "{}: expected a single row or column, got {}x{}",
            path.display(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.iter().copied().collect())
}

pub fn format_matrix(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}
