//! `CKPT1` named-tensor checkpoints.
//!
//! Layout (little-endian): magic `CKPT1`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, rank × `u32` dims, values as `f64`.

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::Reader;

pub const MAGIC: &[u8; 5] = b"CKPT1";

pub fn write_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("missing CKPT1 magic".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        entries.push((name, t));
    }
    r.finish()?;
    Ok(entries)
}
