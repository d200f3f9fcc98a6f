//! On-disk formats for masks, filters, and optimizer traces.
//!
//! Two formats cover everything the pipeline persists:
//!
//! * a tiny binary array container — magic `MBF1`, a dtype byte
//!   (1 = real f64, 2 = complex f64 pairs), a rank byte, the dimensions as
//!   little-endian u64, then the payload as little-endian f64 words. The
//!   round trip is bit-exact, which is what ties experiment stages
//!   together reliably;
//! * plain CSV for anything meant to be eyeballed or plotted. Floats are
//!   printed with Rust's shortest round-trip formatting, so re-reading a
//!   CSV also reproduces the exact values, and identical runs produce
//!   byte-identical files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimizer::OptimizationTrace;

const MAGIC: &[u8; 4] = b"MBF1";
const DTYPE_REAL: u8 = 1;
const DTYPE_COMPLEX: u8 = 2;

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::dataset(path, message)
}

fn write_container(path: &Path, dtype: u8, dims: &[usize], payload: &[f64]) -> Result<()> {
    let mut buf =
        Vec::with_capacity(4 + 2 + 8 * dims.len() + 8 * payload.len());
    buf.extend_from_slice(MAGIC);
    buf.push(dtype);
    buf.push(dims.len() as u8);
    for d in dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_container(path: &Path, want_dtype: u8, want_rank: u8) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut file = fs::File::open(path).map_err(|e| malformed(path, e.to_string()))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() < 6 || &raw[..4] != MAGIC {
        return Err(malformed(path, "not an MBF1 array container"));
    }
    if raw[4] != want_dtype {
        return Err(malformed(
            path,
            format!("dtype {} where {} was expected", raw[4], want_dtype),
        ));
    }
    let rank = raw[5];
    if rank != want_rank {
        return Err(malformed(
            path,
            format!("rank {rank} where {want_rank} was expected"),
        ));
    }
    let header = 6 + 8 * rank as usize;
    if raw.len() < header {
        return Err(malformed(path, "truncated dimension header"));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        let mut b = [0u8; 8];
        b.copy_from_slice(&raw[6 + 8 * i..14 + 8 * i]);
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let n_elems: usize = dims.iter().product::<usize>()
        * if want_dtype == DTYPE_COMPLEX { 2 } else { 1 };
    if raw.len() != header + 8 * n_elems {
        return Err(malformed(
            path,
            format!(
                "payload is {} bytes where {} were expected",
                raw.len() - header,
                8 * n_elems
            ),
        ));
    }
    let payload = raw[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
        .collect();
    Ok((dims, payload))
}

/// Writes a real matrix to the binary container format.
pub fn write_real_matrix(path: impl AsRef<Path>, m: ArrayView2<f64>) -> Result<()> {
    let (rows, cols) = m.dim();
    let payload: Vec<f64> = m.iter().copied().collect();
    write_container(path.as_ref(), DTYPE_REAL, &[rows, cols], &payload)
}

/// Reads a real matrix written by [`write_real_matrix`]; bit-exact.
pub fn read_real_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let (dims, payload) = read_container(path, DTYPE_REAL, 2)?;
    Array2::from_shape_vec((dims[0], dims[1]), payload)
        .map_err(|e| malformed(path, e.to_string()))
}

/// Writes a complex matrix (interleaved re, im) to the binary container.
pub fn write_complex_matrix(path: impl AsRef<Path>, m: ArrayView2<Complex64>) -> Result<()> {
    let (rows, cols) = m.dim();
    let mut payload = Vec::with_capacity(2 * rows * cols);
    for z in m.iter() {
        payload.push(z.re);
        payload.push(z.im);
    }
    write_container(path.as_ref(), DTYPE_COMPLEX, &[rows, cols], &payload)
}

/// Reads a complex matrix written by [`write_complex_matrix`]; bit-exact.
pub fn read_complex_matrix(path: impl AsRef<Path>) -> Result<Array2<Complex64>> {
    let path = path.as_ref();
    let (dims, payload) = read_container(path, DTYPE_COMPLEX, 2)?;
    let values: Vec<Complex64> = payload
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    Array2::from_shape_vec((dims[0], dims[1]), values)
        .map_err(|e| malformed(path, e.to_string()))
}

/// Writes one mask as CSV: one line per frequency bin, frames as columns.
pub fn write_mask_csv(path: impl AsRef<Path>, m: ArrayView2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
            first = false;
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a mask CSV written by [`write_mask_csv`].
pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| malformed(path, e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(str::parse::<f64>).collect();
        let row = row.map_err(|e| malformed(path, format!("line {}: {e}", ln + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(malformed(
                    path,
                    format!("line {} has {} columns, expected {}", ln + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(malformed(path, "empty mask CSV"));
    }
    let cols = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n_rows = flat.len() / cols;
    Array2::from_shape_vec((n_rows, cols), flat).map_err(|e| malformed(path, e.to_string()))
}

/// Writes an optimizer trace as CSV with columns `iteration,bin,objective`
/// (best-so-far objective, full per-bin granularity).
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &OptimizationTrace) -> Result<()> {
    let (n_bins, n_iters) = trace.per_bin.dim();
    let mut out = String::from("iteration,bin,objective\n");
    for it in 0..n_iters {
        for f in 0..n_bins {
            out.push_str(&format!("{it},{f},{}\n", trace.per_bin[[f, it]]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the fullband objective series as CSV (`iteration,objective`), a
/// compact companion to [`write_trace_csv`] for long runs.
pub fn write_fullband_trace_csv(path: impl AsRef<Path>, trace: &OptimizationTrace) -> Result<()> {
    let mut out = String::from("iteration,objective\n");
    for (it, v) in trace.fullband.iter().enumerate() {
        out.push_str(&format!("{it},{v}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// SHA-256 of a byte string as lowercase hex; used to tie persisted masks
/// to the configuration that produced them.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Atomically-ish writes a small text file (write then rename is overkill
/// for these artifact sizes; plain write keeps the dependency surface
/// minimal).
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
