//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `HYSQCKPT`, `u32` version, `u64` seed, the
//! config as `key = value` text, then every parameter in path order as
//! path, rank, dims and `f64` values, and finally a SHA-256 digest of all
//! preceding bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::HybridStackConfig;
use super::params::Model;
use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};

const MAGIC: &[u8; 8] = b"HYSQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, model.seed);
    put_str(&mut out, &model.config.to_text());
    let params = model.named_parameters();
    put_u32(&mut out, params.len() as u32);
    for (path, t) in &params {
        put_str(&mut out, path);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string".into()))
    }
}

/// Parses checkpoint bytes. Corruption is a format error; a well-formed file
/// whose parameters do not fit its own config is a config error.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let seed = r.u64()?;
    let config = HybridStackConfig::parse(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut stored = std::collections::BTreeMap::new();
    for _ in 0..count {
        let path = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        stored.insert(path, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    let mut model = Model::new(config.clone(), seed)?;
    load_parameters(&mut model, stored)?;
    Ok(model)
}

/// Overwrites every parameter of `model` from `stored`, requiring the same
/// path set and shapes.
pub fn load_parameters(model: &mut Model, mut stored: std::collections::BTreeMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    model.visit_mut("", &mut |path, t| {
        if err.is_some() {
            return;
        }
        match stored.remove(path) {
            Some(s) if s.shape() == t.shape() => *t = s,
            Some(s) => {
                err =
                    Some(Error::config(format!("{path}: stored shape {:?}, model expects {:?}", s.shape(), t.shape())))
            }
            None => err = Some(Error::config(format!("checkpoint lacks parameter {path}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::config(format!("checkpoint has unexpected parameter {extra}")));
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint that must match `expected` exactly.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &HybridStackConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::config(format!(
            "checkpoint config does not match: stored\n{}expected\n{}",
            model.config.to_text(),
            expected.to_text()
        )));
    }
    Ok(model)
}
