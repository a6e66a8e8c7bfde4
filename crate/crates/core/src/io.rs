//! Matrix file formats.
//!
//! Two interchangeable on-disk representations are supported:
//!
//! * CSV, row-major, with a header line `# rows cols`;
//! * `.mat64`, a length-prefixed little-endian binary format: the magic
//!   bytes `BSSM`, `u32` rows, `u32` cols, then `rows * cols` `f64` values
//!   in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BSSM";

/// Reads a matrix, picking the format from the file contents (magic bytes)
/// rather than the extension.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let mut head = [0u8; 4];
    let n = file.read(&mut head)?;
    drop(file);
    if n == 4 && &head == MAGIC {
        read_matrix_mat64(path)
    } else {
        read_matrix_csv(path)
    }
}

pub fn read_matrix_mat64(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing BSSM magic".into()));
    }
    let mut buf4 = [0u8; 4];
    reader.read_exact(&mut buf4)?;
    let rows = u32::from_le_bytes(buf4) as usize;
    reader.read_exact(&mut buf4)?;
    let cols = u32::from_le_bytes(buf4) as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut buf8 = [0u8; 8];
    for v in data.iter_mut() {
        reader.read_exact(&mut buf8)?;
        *v = f64::from_le_bytes(buf8);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix_mat64(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut declared: Option<(usize, usize)> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if declared.is_none() && rows.is_empty() {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("bad header on line {}: {e}", lineno + 1)))?;
                if dims.len() == 2 {
                    declared = Some((dims[0], dims[1]));
                }
            }
            continue;
        }
        let row: Vec<f64> = trimmed
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad value on line {}: {e}", lineno + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Format(format!(
                    "ragged row on line {}: {} values, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("empty matrix file".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    if let Some((dr, dc)) = declared {
        if (dr, dc) != (r, c) {
            return Err(Error::Format(format!(
                "header declares {dr}x{dc} but file holds {r}x{c}"
            )));
        }
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "# {} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let mut line = String::new();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.17e}", m[(i, j)]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Output format selector used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    Csv,
    Mat64,
}

impl MatrixFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Mat64 => "mat64",
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
        match self {
            MatrixFormat::Csv => write_matrix_csv(path, m),
            MatrixFormat::Mat64 => write_matrix_mat64(path, m),
        }
    }
}

/// Serde adapter storing a `DMatrix` as row-major nested vectors, so JSON
/// artifacts stay readable outside this toolkit.
pub mod serde_mat {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(r, c, &flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("bss_io_{}_{name}", std::process::id()));
        p
    }

    #[test]
    fn csv_roundtrip_with_header() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3e-8, 4.0, 5.0, 6.125]);
        let p = tmpfile("a.csv");
        write_matrix_csv(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        assert_eq!(m, back);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# 2 3"));
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn mat64_roundtrip_bit_exact() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, f64::MIN_POSITIVE, -0.0, 2.5, 1e300, -7.25]);
        let p = tmpfile("b.mat64");
        write_matrix_mat64(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn header_mismatch_rejected() {
        let p = tmpfile("c.csv");
        std::fs::write(&p, "# 3 2\n1,2\n3,4\n").unwrap();
        assert!(matches!(read_matrix_csv(&p), Err(Error::Format(_))));
        std::fs::remove_file(&p).ok();
    }
}
