//! MELT tensor container:
//!
//! ```text
//! "MELT" | version: u8 | dtype: u8 (0 = f32) | rank: u32 LE | dims: rank × u32 LE | payload: f32 LE
//! ```

use std::path::Path;

use super::{numel, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MELT";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_melt(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("MELT: truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub fn read_melt(mut bytes: &[u8]) -> Result<Tensor> {
    let b = &mut bytes;
    if take(b, 4)? != MAGIC {
        return Err(Error::Format("MELT: bad magic".into()));
    }
    let version = take(b, 1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("MELT: unsupported version {version}")));
    }
    let dtype = take(b, 1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("MELT: unsupported dtype code {dtype}")));
    }
    let rank = take_u32(b)? as usize;
    let shape = (0..rank)
        .map(|_| take_u32(b).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let payload = take(b, 4 * n)?;
    if !b.is_empty() {
        return Err(Error::Format(format!("MELT: {} trailing bytes", b.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_melt_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_melt(t)).map_err(|e| Error::io(path, e))
}

pub fn read_melt_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_melt(&bytes)
}
