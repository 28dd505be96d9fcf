//! `DMCK` checkpoints: magic, version u16, parameter count u32, then per
//! parameter `name_len u32 | name | rank u32 | dims u32 * rank | f32 * numel`,
//! all little-endian.

use std::path::Path;

use super::unet::{UNet, UNetConfig};
use super::{DiffusionError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(model: &UNet, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * model.param_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, p) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint for a model built with `config`; names and shapes must
/// match that architecture.
pub fn read_checkpoint(path: &Path, config: &UNetConfig) -> Result<UNet> {
    let buf = std::fs::read(path)?;
    let err = |m: String| DiffusionError::Checkpoint(m);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf
            .get(pos..pos + n)
            .ok_or_else(|| err(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let template = UNet::new(config.clone(), 0)?;
    if count != template.params().len() {
        return Err(err(format!(
            "{count} parameters stored, architecture has {}",
            template.params().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (expected_name, expected) in template.param_names().iter().zip(template.params()) {
        let len = u32_at(take(4)?);
        let name = std::str::from_utf8(take(len)?).map_err(|_| err("non UTF-8 name".into()))?;
        if name != expected_name {
            return Err(err(format!("expected parameter `{expected_name}`, found `{name}`")));
        }
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        if shape != expected.shape() {
            return Err(err(format!("`{name}` has shape {shape:?}, expected {:?}", expected.shape())));
        }
        let n: usize = shape.iter().product();
        let data = take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if pos != buf.len() {
        return Err(err(format!("{} trailing bytes", buf.len() - pos)));
    }
    template.with_params(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch() {
        let cfg = UNetConfig {
            base_channels: 8,
            hidden_dim: 12,
            image_size: 8,
            channels: 1,
            time_embed_dim: 8,
            norm_groups: 2,
            ..UNetConfig::default()
        };
        let net = UNet::new(cfg.clone(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&net, &path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"DMCK");
        assert_eq!(read_checkpoint(&path, &cfg).unwrap(), net);
        let other = UNetConfig {
            base_channels: 16,
            ..cfg
        };
        assert!(matches!(read_checkpoint(&path, &other), Err(DiffusionError::Checkpoint(_))));
    }
}
