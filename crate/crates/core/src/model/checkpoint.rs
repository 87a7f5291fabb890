//! Binary checkpoint format.
//!
//! Layout, all integers little endian: `b"CKPT"`, `u32` version, `u32`
//! tensor count, `u32` config length and the JSON model config, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank × u32`
//! extents and the row-major `f32` data.

use std::path::Path;

use super::{DecoderKind, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::image::encoder::ByteReader;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for (name, t) in model.params() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let config_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        if numel.saturating_mul(4) > bytes.len() {
            return Err(Error::Format(format!("truncated data for tensor {name}")));
        }
        let data = (0..numel).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        params.push((name, t));
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Model::from_params(config, params).map_err(|e| match e {
        Error::Config(msg) => Error::Format(format!("checkpoint config invalid: {msg}")),
        other => other,
    })
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    read_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and fails with a configuration error when it holds a
/// different decoder family than `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: DecoderKind) -> Result<Model<f32>> {
    let model = load_checkpoint(path)?;
    let found = model.config().decoder;
    if found != expected {
        return Err(Error::Config(format!(
            "checkpoint holds a {} decoder, {} was requested",
            found.name(),
            expected.name()
        )));
    }
    Ok(model)
}
