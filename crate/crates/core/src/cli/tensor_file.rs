//! Binary tensor files.
//!
//! Layout, little-endian:
//! - magic: `CT1\0`
//! - ndim: u32
//! - dims: ndim × u32
//! - data: f32 × product(dims), row-major
//!
//! Values are computed in f64 and stored as f32; readers upcast.

use std::path::Path;

use crate::numerics::Tensor;

use super::{write_atomic, CliError};

pub const MAGIC: [u8; 4] = *b"CT1\0";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], CliError> {
    if bytes.len() < n {
        return Err(CliError::Io(format!("tensor file truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32, CliError> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor, CliError> {
    if take(&mut bytes, 4, "magic")? != MAGIC {
        return Err(CliError::Io("not a tensor file (bad magic)".into()));
    }
    let ndim = read_u32(&mut bytes, "header")? as usize;
    let dims = (0..ndim)
        .map(|_| read_u32(&mut bytes, "dims").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let count: usize = dims.iter().product();
    if bytes.len() != 4 * count {
        return Err(CliError::Io(format!(
            "tensor file payload has {} bytes, dims {dims:?} need {}",
            bytes.len(),
            4 * count
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&dims, data).map_err(|e| CliError::Io(format!("invalid tensor file: {e}")))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), CliError> {
    write_atomic(path, &encode(t))
}
