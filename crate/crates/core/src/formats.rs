//! Small on-disk formats: SPRF feature files, timestep-grid specs, and the
//! atomic write primitive every artifact writer goes through.
//!
//! Parsers here accept untrusted bytes; they validate every length before
//! allocating and never panic on malformed input.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const SPRF_MAGIC: &[u8; 4] = b"SPRF";
pub const SPRF_VERSION: u32 = 1;

/// Hard cap on N * D for feature files, to bound allocation on hostile input.
const SPRF_MAX_ELEMS: u64 = 1 << 28;

/// Serialize an N x D feature matrix: magic, version, N, D, row-major f32 LE.
pub fn write_sprf(data: &Array2<f32>) -> Vec<u8> {
    let (n, d) = data.dim();
    let mut out = Vec::with_capacity(16 + 4 * n * d);
    out.extend_from_slice(SPRF_MAGIC);
    out.extend_from_slice(&SPRF_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for row in data.rows() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse an SPRF byte stream. The byte length must be exactly
/// `16 + 4 * N * D`; trailing bytes are rejected.
pub fn parse_sprf(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "SPRF header needs 16 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != SPRF_MAGIC {
        return Err(Error::Format("bad SPRF magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SPRF_VERSION {
        return Err(Error::Format(format!(
            "unsupported SPRF version {version} (expected {SPRF_VERSION})"
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let elems = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("SPRF dimensions overflow".into()))?;
    if elems > SPRF_MAX_ELEMS {
        return Err(Error::Format(format!("SPRF dimensions {n}x{d} too large")));
    }
    let expected = 16 + 4 * elems;
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "SPRF length {} != expected {expected} for {n}x{d}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(elems as usize);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((n as usize, d as usize), data)
        .map_err(|e| Error::Format(format!("SPRF shape: {e}")))
}

pub fn save_sprf(path: &Path, data: &Array2<f32>) -> Result<()> {
    atomic_write(path, &write_sprf(data))
}

pub fn load_sprf(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path)?;
    parse_sprf(&bytes)
}

/// Parse `A:B:N` into N evenly spaced timesteps inclusive of both ends.
/// `N = 1` is allowed only when `A == B`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(Error::Argument(format!(
            "grid `{spec}` must have the form A:B:N"
        )));
    };
    let a: f64 = a
        .parse()
        .map_err(|_| Error::Argument(format!("grid start `{a}` is not a number")))?;
    let b: f64 = b
        .parse()
        .map_err(|_| Error::Argument(format!("grid end `{b}` is not a number")))?;
    let n: usize = n
        .parse()
        .map_err(|_| Error::Argument(format!("grid count `{n}` is not an integer")))?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Argument("grid endpoints must be finite".into()));
    }
    if n == 0 {
        return Err(Error::Argument("grid count must be at least 1".into()));
    }
    if n > 100_000 {
        return Err(Error::Argument(format!("grid count {n} too large")));
    }
    if n == 1 {
        if a != b {
            return Err(Error::Argument(
                "one-point grid requires identical endpoints".into(),
            ));
        }
        return Ok(vec![a]);
    }
    if b < a {
        return Err(Error::Argument(format!("grid end {b} before start {a}")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(a + (b - a) * i as f64 / (n - 1) as f64);
    }
    // pin the endpoint exactly
    out[n - 1] = b;
    Ok(out)
}

/// Write `bytes` to `path` through a same-directory temp file and rename, so
/// no interrupted write leaves a torn artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(
        ".{}.{}.tmp",
        file_name.to_string_lossy(),
        std::process::id()
    );
    let tmp_path = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    std::fs::write(&tmp_path, bytes)?;
    match std::fs::rename(&tmp_path, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp_path);
            Err(e.into())
        }
    }
}
