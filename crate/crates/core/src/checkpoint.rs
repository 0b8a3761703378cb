//! Binary checkpoint format (little-endian):
//!
//! ```text
//! b"SSLCKPT\0"  u32 version
//! u32 len, model config as JSON
//! u32 count, then per tensor: u32 len, name, u32 ndim, u64 dims.., f32 data..
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSLCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} is not a checkpoint: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(params.config()).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend(cfg);
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams, CheckpointError> {
    let bad = |detail: &str| CheckpointError::Format { path: path.to_path_buf(), detail: detail.into() };
    let truncated = || bad("truncated file");
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = c.u32().ok_or_else(truncated)? as usize;
    let config: ModelConfig =
        serde_json::from_slice(c.take(len).ok_or_else(truncated)?).map_err(|e| bad(&format!("config: {e}")))?;
    let count = c.u32().ok_or_else(truncated)? as usize;
    let mut names = Vec::with_capacity(count.min(4096));
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?).map_err(|_| bad("non-utf8 name"))?;
        let ndim = c.u32().ok_or_else(truncated)? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(truncated)?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?).ok_or_else(truncated)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        names.push(name.to_string());
        tensors.push(Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))?);
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ModelParams::from_parts(config, names, tensors)?)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode(params)).map_err(io_err)
}

pub fn load(path: &Path) -> Result<ModelParams, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let p = ModelParams::build(&ModelConfig::sononet_mini(14), 3).unwrap();
        let back = decode(&encode(&p), Path::new("x")).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::build(&ModelConfig::sononet_mini(5), 3).unwrap();
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode(b"NOTACKPT", Path::new("x")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, Path::new("x")).is_err());
    }
}
