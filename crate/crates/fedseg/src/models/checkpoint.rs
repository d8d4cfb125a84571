//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `"FSEG"` magic, u32 version, u64 arch fingerprint, u32 entry count,
//! then per entry: u32 name length, UTF-8 name, u32 shape rank,
//! u32 dims, f32 payload.

use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSEG";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&params.arch_fingerprint.to_le_bytes());
    buf.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, tensor) in &params.entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let raw = std::fs::read(path)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!("unsupported version {version}")));
    }
    let arch_fingerprint = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::MalformedCheckpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::MalformedCheckpoint(format!("entry `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != raw.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes after the last entry",
            raw.len() - r.pos
        )));
    }
    Ok(ModelParams { entries, arch_fingerprint })
}
