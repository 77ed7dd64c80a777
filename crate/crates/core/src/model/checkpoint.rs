//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//! `"PMLB"`, version, config length, config JSON bytes, then until end of
//! file a sequence of arrays: name length, name bytes, dtype tag (`0` for
//! f32), rank, extents, then the f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMLB";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON object; the model configuration lives under `"model"`.
    pub config: Value,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

fn put(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large for the checkpoint format")))
}

/// Reads a `u32`, or `None` at a clean end of file.
fn get_opt(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            return if got == 0 { Ok(None) } else { Err(Error::Format("truncated checkpoint".into())) };
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn get(r: &mut impl Read) -> Result<u32> {
    get_opt(r)?.ok_or_else(|| Error::Format("truncated checkpoint".into()))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put(w, CHECKPOINT_VERSION)?;
        let cfg = serde_json::to_string(&self.config)?;
        put(w, len_u32(cfg.len(), "config")?)?;
        w.write_all(cfg.as_bytes())?;
        for (name, t) in &self.arrays {
            put(w, len_u32(name.len(), "name")?)?;
            w.write_all(name.as_bytes())?;
            put(w, DTYPE_F32)?;
            put(w, len_u32(t.shape().len(), "rank")?)?;
            for &e in t.shape() {
                put(w, len_u32(e, "extent")?)?;
            }
            let mut bytes = Vec::with_capacity(4 * t.numel());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = get_bytes(r, 4).map_err(|_| Error::Format("not a checkpoint: file too short".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = get(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let n = get(r)? as usize;
        let cfg = String::from_utf8(get_bytes(r, n)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config: Value = serde_json::from_str(&cfg)?;
        let mut arrays = Vec::new();
        while let Some(n) = get_opt(r)? {
            let name = String::from_utf8(get_bytes(r, n as usize)?).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = get(r)?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("array `{name}` has unsupported dtype tag {dtype}")));
            }
            let rank = get(r)? as usize;
            let shape = (0..rank).map(|_| get(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = get_bytes(r, 4 * numel)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
            arrays.push((name, t));
        }
        Ok(Self { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Arrays whose names start with `prefix`, with the prefix removed.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let (hit, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.arrays).into_iter().partition(|(n, _)| n.starts_with(prefix));
        self.arrays = rest;
        hit.into_iter().map(|(n, t)| (n[prefix.len()..].to_string(), t)).collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self.config.get("model").ok_or_else(|| Error::Format("checkpoint config has no `model` entry".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

impl<T: Real> Model<T> {
    /// Checkpoint holding only this model, arrays under `model.`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let arrays = self.named_tensors().into_iter().map(|(n, t)| (format!("model.{n}"), t.cast::<f32>())).collect();
        Checkpoint { config: serde_json::json!({ "model": self.config }), arrays }
    }

    /// Rebuilds the model stored in `ck`, consuming its `model.` arrays.
    pub fn from_checkpoint(ck: &mut Checkpoint) -> Result<Self> {
        let config = ck.model_config()?;
        let named = ck.take_prefixed("model.").into_iter().map(|(n, t)| (n, t.cast::<T>())).collect();
        Model::from_named(config, named)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&mut Checkpoint::load(path)?)
    }
}
