//! On-disk tensor formats.
//!
//! Text tables are comma-separated with one header line, UTF-8 and LF line
//! endings. Reals are written with 17 significant digits so 64-bit values
//! round-trip exactly. Features may instead use a binary block: an 8-byte
//! header of N then P as little-endian u32, followed by N*P little-endian
//! 32-bit floats in row-major order; the `.bin` extension selects it.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, Result};

/// Round-trip-safe decimal rendering (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| CliError::io(path, e))?,
    ))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Integer patch coordinates, header `row,col`.
pub fn write_coords(path: &Path, positions: &[(u32, u32)]) -> Result<()> {
    let mut w = create(path)?;
    let mut text = String::from("row,col\n");
    for &(r, c) in positions {
        text.push_str(&format!("{r},{c}\n"));
    }
    w.write_all(text.as_bytes())
        .map_err(|e| CliError::io(path, e))?;
    finish(w, path)
}

pub fn read_coords(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("row,col") => {}
        Some(other) => {
            return Err(CliError::schema(
                path,
                format!("expected header \"row,col\", found {other:?}"),
            ))
        }
        None => return Err(CliError::schema(path, "empty file")),
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let parse = |field: Option<&str>, name: &str| -> Result<u32> {
            field.and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                CliError::schema(path, format!("line {}: bad {name} in {line:?}", lineno + 2))
            })
        };
        let r = parse(parts.next(), "row")?;
        let c = parse(parts.next(), "col")?;
        if parts.next().is_some() {
            return Err(CliError::schema(
                path,
                format!("line {}: expected 2 columns", lineno + 2),
            ));
        }
        out.push((r, c));
    }
    Ok(out)
}

/// N x P real table with header `{prefix}0,{prefix}1,...`.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, prefix: &str) -> Result<()> {
    let mut w = create(path)?;
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    w.write_all(text.as_bytes())
        .map_err(|e| CliError::io(path, e))?;
    finish(w, path)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::schema(path, "empty file"))?;
    let ncols = header.split(',').count();
    let mut values: Vec<f64> = Vec::new();
    let mut nrows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(CliError::schema(
                path,
                format!(
                    "line {}: {} columns, header has {ncols}",
                    lineno + 2,
                    fields.len()
                ),
            ));
        }
        for (j, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::schema(
                    path,
                    format!(
                        "row {}, column {}: unparseable value {field:?}",
                        nrows + 1,
                        j + 1
                    ),
                )
            })?;
            if !v.is_finite() {
                return Err(CliError::schema(
                    path,
                    format!(
                        "row {}, column {}: non-finite value {field}",
                        nrows + 1,
                        j + 1
                    ),
                ));
            }
            values.push(v);
        }
        nrows += 1;
    }
    if nrows == 0 {
        return Err(CliError::schema(path, "no data rows"));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &values))
}

pub fn write_features_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = create(path)?;
    let mut bytes: Vec<u8> = Vec::with_capacity(8 + m.len() * 4);
    bytes.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
    w.write_all(&bytes).map_err(|e| CliError::io(path, e))?;
    finish(w, path)
}

pub fn read_features_bin(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(CliError::schema(path, "shorter than the 8-byte header"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let p = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + n * p * 4;
    if bytes.len() != expected {
        return Err(CliError::schema(
            path,
            format!(
                "header says {n} x {p} ({expected} bytes), file has {}",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(n * p);
    for idx in 0..n * p {
        let off = 8 + idx * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(CliError::schema(
                path,
                format!(
                    "row {}, column {}: non-finite value",
                    idx / p + 1,
                    idx % p + 1
                ),
            ));
        }
        values.push(v);
    }
    Ok(DMatrix::from_row_slice(n, p, &values))
}

/// Features by extension: `.bin` selects the binary block, anything else the
/// text table.
pub fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    if path.extension().is_some_and(|e| e == "bin") {
        read_features_bin(path)
    } else {
        read_matrix(path)
    }
}
