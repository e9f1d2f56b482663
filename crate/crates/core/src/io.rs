//! Little-endian `f32` matrix files and small text-table helpers.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Writes `m` row-major as little-endian `f32`.
pub fn write_f32(path: &Path, m: &Array2<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Reads a `[rows × cols]` little-endian `f32` matrix.
pub fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Format { path: path.to_path_buf(), reason: "file not found".into() },
            _ => e.into(),
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes for [{rows} x {cols}] f32, found {}", rows * cols * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

/// Rounds every entry through `f32`, matching what a write/read cycle does.
pub fn quantize_f32(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| f64::from(v as f32))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_delimited(path, ',', header, rows)
}

pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_delimited(path, '\t', header, rows)
}

fn write_delimited(path: &Path, sep: char, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    out.push_str(&header.join(&sep.to_string()));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(&sep.to_string()));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a delimited table, skipping the header line.
pub fn read_delimited(path: &Path, sep: char) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(sep).map(str::to_string).collect())
        .collect())
}

pub fn matrix_csv(path: &Path, m: &Array2<f64>, row_ids: &[String], col_ids: &[String]) -> Result<()> {
    let mut header = vec![""];
    header.extend(col_ids.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = m
        .rows()
        .into_iter()
        .zip(row_ids)
        .map(|(r, id)| std::iter::once(id.clone()).chain(r.iter().map(|v| format!("{v:.6}"))).collect())
        .collect();
    write_csv(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_files_round_trip_quantized_values(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let m = Array2::from_shape_simple_fn((rows, cols), || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 10.0 - 5.0
            });
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.f32");
            write_f32(&p, &m).unwrap();
            let back = read_f32(&p, rows, cols).unwrap();
            prop_assert_eq!(back, quantize_f32(&m));
        }
    }

    #[test]
    fn wrong_size_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        write_f32(&p, &Array2::zeros((2, 3))).unwrap();
        assert!(matches!(read_f32(&p, 3, 3), Err(Error::Format { .. })));
    }
}
