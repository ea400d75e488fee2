//! Versioned binary container: a JSON header followed by named f32 tensors.
//!
//! Layout (little endian): `b"SWPG"`, `u32` version, `u32` header length,
//! header UTF-8 JSON, `u32` tensor count, then per tensor a `u16` name
//! length, the UTF-8 name, a `u8` rank, `u32` dims and the raw f32 data.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SWPG";
pub const VERSION: u32 = 1;
/// Largest element count one tensor may declare.
pub const MAX_ELEMENTS: usize = 1 << 31;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor `{0}` declares more data than the file holds")]
    DimensionOverflow(String),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(header: &str, tensors: &[(String, Tensor)]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let len = u32::try_from(header.len()).map_err(|_| CheckpointError::Malformed("header too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed(format!("name `{name}` too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?
        .to_owned();
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let bytes_needed = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| CheckpointError::DimensionOverflow(name.clone()))?
            * 4;
        let data = r
            .take(bytes_needed, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(CheckpointData { header, tensors })
}

pub fn write(path: &Path, header: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(header, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
