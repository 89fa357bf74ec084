//! CSV and 8-bit PGM writers for matrices (spectrograms, alignments).

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::scalar::Scalar;

/// One CSV line per row.
pub fn matrix_csv<T: Scalar>(values: &[T], rows: usize, cols: usize) -> String {
    let mut s = String::with_capacity(rows * cols * 10);
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", values[r * cols + c]);
        }
        s.push('\n');
    }
    s
}

/// Binary PGM of a `rows x cols` matrix with rows on the x-axis (so time
/// runs left to right when rows are frames), min-max scaled to 0..=255.
/// Low bins / early tokens are drawn at the bottom.
pub fn matrix_pgm<T: Scalar>(values: &[T], rows: usize, cols: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{rows} {cols}\n255\n").into_bytes();
    for c in (0..cols).rev() {
        for r in 0..rows {
            let v = (values[r * cols + c].as_f64() - lo) / span;
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write_csv<T: Scalar>(path: &Path, values: &[T], rows: usize, cols: usize) -> Result<()> {
    std::fs::write(path, matrix_csv(values, rows, cols))?;
    Ok(())
}

pub fn write_pgm<T: Scalar>(path: &Path, values: &[T], rows: usize, cols: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&matrix_pgm(values, rows, cols))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let v = [0.0f64, 1.0, 2.0, 4.0];
        let img = matrix_pgm(&v, 2, 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        // top row is column 1: [1, 4], bottom row column 0: [0, 2]
        assert_eq!(&img[header.len()..], &[64, 255, 0, 128]);
    }

    #[test]
    fn csv_rows() {
        assert_eq!(matrix_csv(&[1.0f64, 2.5, -3.0, 0.0], 2, 2), "1,2.5\n-3,0\n");
    }
}
