//! Binary parameter table.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MTCKPT01"
//! digest  32 bytes  SHA-256 of the payload
//! length   u64      payload byte length
//! payload:
//!   count u32
//!   count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim, values f64 x numel }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MTCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint digest mismatch: header {expected}, payload {actual}")]
    DigestMismatch { expected: String, actual: String },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload(store: &ParamStore, rename: &dyn Fn(&str) -> Option<String>) -> Vec<u8> {
    let entries: Vec<(String, &Tensor)> = store
        .iter()
        .filter_map(|(_, p)| rename(&p.name).map(|n| (n, &p.value)))
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn frame(payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    frame(payload(store, &|n| Some(n.to_string())))
}

/// Serializes only the parameters for which `rename` returns a name, under
/// that name.
pub fn to_bytes_filtered(store: &ParamStore, rename: &dyn Fn(&str) -> Option<String>) -> Vec<u8> {
    frame(payload(store, rename))
}

/// Hex digest stored in a checkpoint header.
pub fn header_digest(bytes: &[u8]) -> Result<String, CheckpointError> {
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    Ok(hex::encode(&bytes[8..40]))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let expected = header_digest(bytes)?;
    let len = u64::from_le_bytes(bytes[40..48].try_into().unwrap()) as usize;
    let body = &bytes[48..];
    if body.len() != len {
        return Err(CheckpointError::Corrupt(format!(
            "payload length {} does not match header {len}",
            body.len()
        )));
    }
    let actual = sha256_hex(body);
    if actual != expected {
        return Err(CheckpointError::DigestMismatch { expected, actual });
    }
    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store
            .add(name, t)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(store)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save(path: &Path, store: &ParamStore) -> Result<String, CheckpointError> {
    let bytes = to_bytes(store);
    write_bytes(path, &bytes)?;
    header_digest(&bytes)
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
