//! Binary tensor files and their JSON sidecars.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                   |
//! |----------------|-------------------------------------------|
//! | 16             | magic `SAGESIM-TENSOR\0\0`                |
//! | 4              | format version (`u32`, currently 1)       |
//! | 8              | rank (`u64`, 1..=4)                       |
//! | 8 × rank       | sizes (`u64`)                             |
//! | 4 × numel      | row-major `f32` values                    |
//!
//! The sidecar lives next to the tensor as `<stem>.meta.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Distribution;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 16] = b"SAGESIM-TENSOR\0\0";
pub const VERSION: u32 = 1;

/// Creation parameters recorded next to a generated tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub distribution: Distribution,
    pub seed: u64,
    pub stream: u64,
    pub generator: String,
    pub format_version: u32,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 + 8 * (1 + t.rank()) + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.as_slice() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::TensorFormat { path: path.to_path_buf(), reason };
    let mut cursor = Cursor { bytes, pos: 0 };
    if cursor.take(16).map_err(&bad)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(cursor.take(4).map_err(&bad)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rank = cursor.u64().map_err(&bad)?;
    if !(1..=4).contains(&rank) {
        return Err(bad(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| cursor.u64().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(&bad)?;
    let numel =
        shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("shape overflows".into()))?;
    let payload = cursor.take(numel.checked_mul(4).ok_or_else(|| bad("shape overflows".into()))?).map_err(&bad)?;
    if cursor.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cursor.pos)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::new(shape, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_tensor(t))?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}

pub fn write_sidecar(path: &Path, meta: &TensorMeta) -> Result<()> {
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<TensorMeta> {
    Ok(serde_json::from_slice(&fs::read(sidecar_path(path))?)?)
}
