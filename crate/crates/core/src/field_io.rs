//! Field snapshots: a small little-endian binary format and a CSV export.
//!
//! Binary layout: 8-byte magic `GPRGFLD1`, `n_r` and `n_theta` as `u64`,
//! the disk radius as `f64`, then `re, im` pairs as `f64` in row-major
//! order (radial index outer).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{GprgError, Result};
use crate::grid::{Field, PolarGrid};

pub const MAGIC: &[u8; 8] = b"GPRGFLD1";
const HEADER_LEN: usize = 32;

pub fn encode(field: &Field) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * g.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(g.n_r() as u64).to_le_bytes());
    out.extend_from_slice(&(g.n_theta() as u64).to_le_bytes());
    out.extend_from_slice(&g.radius().to_le_bytes());
    for z in field.values() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

/// Decodes a snapshot, building its grid from the header.
pub fn decode(bytes: &[u8]) -> Result<Field> {
    let (n_r, n_theta, radius) = decode_header(bytes)?;
    let grid = Arc::new(PolarGrid::new(n_r, n_theta, radius)?);
    decode_values(bytes, &grid)
}

/// Decodes a snapshot that must live on `grid`.
pub fn decode_on(bytes: &[u8], grid: &Arc<PolarGrid>) -> Result<Field> {
    let (n_r, n_theta, radius) = decode_header(bytes)?;
    if n_r != grid.n_r() || n_theta != grid.n_theta() || radius != grid.radius() {
        return Err(GprgError::GridMismatch(format!(
            "snapshot grid {n_r}x{n_theta} (R = {radius}) differs from {}x{} (R = {})",
            grid.n_r(),
            grid.n_theta(),
            grid.radius()
        )));
    }
    decode_values(bytes, grid)
}

fn decode_header(bytes: &[u8]) -> Result<(usize, usize, f64)> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(GprgError::Format("not a field snapshot (bad magic)".into()));
    }
    let word = |k: usize| -> [u8; 8] { bytes[8 * k..8 * k + 8].try_into().expect("8 bytes") };
    let n_r = usize::try_from(u64::from_le_bytes(word(1)))
        .map_err(|_| GprgError::Format("n_r does not fit in memory".into()))?;
    let n_theta = usize::try_from(u64::from_le_bytes(word(2)))
        .map_err(|_| GprgError::Format("n_theta does not fit in memory".into()))?;
    Ok((n_r, n_theta, f64::from_le_bytes(word(3))))
}

fn decode_values(bytes: &[u8], grid: &Arc<PolarGrid>) -> Result<Field> {
    let body = &bytes[HEADER_LEN..];
    if body.len() != 16 * grid.len() {
        return Err(GprgError::Format(format!(
            "snapshot body has {} bytes, expected {}",
            body.len(),
            16 * grid.len()
        )));
    }
    let values = body
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex64::new(re, im)
        })
        .collect();
    Field::from_values(grid, values)
}

pub fn read(path: &Path) -> Result<Field> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn read_on(path: &Path, grid: &Arc<PolarGrid>) -> Result<Field> {
    decode_on(&fs::read(path)?, grid)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| GprgError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write(path: &Path, field: &Field) -> Result<()> {
    write_atomic(path, &encode(field))
}

/// `r,theta,re,im,abs2` per grid point.
pub fn to_csv(field: &Field) -> String {
    let g = field.grid();
    let mut out = String::from("r,theta,re,im,abs2\n");
    for i in 0..g.n_r() {
        let r = g.r_nodes()[i];
        for (j, z) in field.row(i).iter().enumerate() {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r,
                g.theta(j),
                z.re,
                z.im,
                z.norm_sqr()
            ));
        }
    }
    out
}
