//! Binary tensor container used for checkpoints and training snapshots.
//!
//! Layout, all little-endian:
//!   magic "DHIA" | version u32 | tensor count u32 |
//!   then per tensor: rows u64 | cols u64 | rows*cols f64 payload (row-major)
//!
//! Values round-trip bit-exactly; callers define what the tensor sequence
//! means and should validate shapes against their own manifest.

use std::io::{Read, Write};

use crate::diffnet::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DHIA";
pub const VERSION: u32 = 1;

/// Guard against absurd headers on corrupt input (1e8 entries = 800 MB).
const MAX_TENSOR_ENTRIES: u64 = 100_000_000;

pub fn write_tensors(w: &mut impl Write, tensors: &[&Matrix]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<Matrix>> {
    let data_err = |msg: String| Error::Data(msg);
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if magic != MAGIC {
        return Err(data_err(format!("bad checkpoint magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(data_err(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let rows = read_u64(r)?;
        let cols = read_u64(r)?;
        let entries = rows
            .checked_mul(cols)
            .filter(|&n| n <= MAX_TENSOR_ENTRIES)
            .ok_or_else(|| data_err(format!("tensor {i} header claims {rows}x{cols}")))?;
        let mut data = Vec::with_capacity(entries as usize);
        let mut buf = [0u8; 8];
        for _ in 0..entries {
            read_exact(r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Matrix::from_vec(rows as usize, cols as usize, data)?);
    }
    Ok(tensors)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
