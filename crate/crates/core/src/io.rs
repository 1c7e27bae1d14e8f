//! Shared file formats: binary PGM images and plain numeric CSV matrices.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::io::{BufWriter, Write};
use std::path::Path;

/// 8-bit binary PGM (P5, maxval 255), row-major.
pub fn write_pgm8<P: AsRef<Path>>(path: P, data: &[u8], height: usize, width: usize) -> Result<()> {
    assert_eq!(data.len(), height * width);
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    Ok(())
}

/// 16-bit binary PGM (P5, maxval 65535), min-max scaled, big-endian samples.
pub fn write_pgm16_scaled<P: AsRef<Path>>(path: P, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n65535\n")?;
    let mut buf = Vec::with_capacity(h * w * 2);
    for v in img.iter() {
        let q = (65535.0 * (v - lo) / span).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Plain CSV of floats, one matrix row per line, no header.
pub fn write_matrix_csv<P: AsRef<Path>>(path: P, rows: &[Vec<f64>]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn write_array_csv<P: AsRef<Path>>(path: P, arr: &Array2<f64>) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for row in arr.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Reads a headerless rectangular CSV of floats.
pub fn read_array_csv<P: AsRef<Path>>(path: P) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::DimensionMismatch(format!(
                    "ragged csv: line {} has {} fields, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("csv matrix"));
    }
    let (h, w) = (rows.len(), rows[0].len());
    let mut arr = Array2::zeros((h, w));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            arr[[i, j]] = v;
        }
    }
    Ok(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pgm8_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm8(&path, &[0, 128, 255, 64], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 64]);
    }

    #[test]
    fn pgm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = array![[0.0, 1.0], [0.5, 0.25]];
        write_pgm16_scaled(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(u16::from_be_bytes([payload[0], payload[1]]), 0);
        assert_eq!(u16::from_be_bytes([payload[2], payload[3]]), 65535);
    }

    #[test]
    fn array_csv_roundtrip_and_ragged_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let a = array![[1.0, 2.5], [-3.0, 1e-17]];
        write_array_csv(&path, &a).unwrap();
        let b = read_array_csv(&path).unwrap();
        assert_eq!(a, b);

        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(matches!(read_array_csv(&path), Err(Error::DimensionMismatch(_))));
    }
}
