//! Binary checkpoint: magic, a JSON header (model config, epoch, parameter
//! names and shapes), then every parameter as little-endian floats. An
//! FNV-1a checksum over the payload catches truncation and bit rot.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TwoStageModel};

const MAGIC: &[u8; 8] = b"SEGDEC01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    dtype: String,
    params: Vec<(String, Vec<usize>)>,
    checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save_checkpoint(model: &TwoStageModel, epoch: usize, path: &Path) -> Result<()> {
    let dtype = dtype_name(model.dtype())?;
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for p in model.params() {
        let t = p.var.as_tensor().flatten_all()?;
        match model.dtype() {
            DType::F32 => t.to_vec1::<f32>()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            _ => t.to_vec1::<f64>()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        params.push((p.name.clone(), p.var.dims().to_vec()));
    }
    let header = Header { model: model.config().clone(), epoch, dtype: dtype.into(), params, checksum: fnv1a(&payload) };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// A loaded checkpoint: the rebuilt model and the epoch it was saved at.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: TwoStageModel,
    pub epoch: usize,
}

/// Loads a checkpoint; with `expected`, the stored architecture must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let corrupt = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];
    if fnv1a(payload) != header.checksum {
        return Err(corrupt("checksum mismatch"));
    }
    if let Some(cfg) = expected {
        let arch = |c: &ModelConfig| (c.input_channels, c.base_channels, c.downsample_factor);
        if arch(cfg) != arch(&header.model) {
            return Err(Error::Checkpoint(format!(
                "{}: architecture mismatch (checkpoint has input_channels={}, base_channels={}, downsample_factor={}; \
                 config has {}, {}, {})",
                path.display(),
                header.model.input_channels,
                header.model.base_channels,
                header.model.downsample_factor,
                cfg.input_channels,
                cfg.base_channels,
                cfg.downsample_factor
            )));
        }
    }
    let (dtype, width) = match header.dtype.as_str() {
        "f32" => (DType::F32, 4),
        "f64" => (DType::F64, 8),
        other => return Err(corrupt(&format!("unknown dtype {other}"))),
    };
    let mut model = TwoStageModel::new(&header.model, 0, dtype).map_err(|e| corrupt(&e.to_string()))?;
    if let Some(cfg) = expected {
        model.set_grad_stops(cfg.grad_stop_shortcuts, cfg.grad_stop_seg_features);
    }
    let names: Vec<&str> = model.params().map(|p| p.name.as_str()).collect();
    if names.len() != header.params.len() || names.iter().zip(&header.params).any(|(a, (b, _))| a != b) {
        return Err(corrupt("parameter names do not match the architecture"));
    }
    let mut offset = 0;
    let mut values = Vec::with_capacity(names.len());
    for (p, (_, shape)) in model.params().zip(&header.params) {
        if p.var.dims() != shape.as_slice() {
            return Err(corrupt(&format!("{}: shape {shape:?} differs from {:?}", p.name, p.var.dims())));
        }
        let n: usize = shape.iter().product();
        let chunk = payload.get(offset..offset + n * width).ok_or_else(|| corrupt("truncated payload"))?;
        offset += n * width;
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?
            }
            _ => {
                let v: Vec<f64> = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?
            }
        };
        values.push(t);
    }
    if offset != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    model.restore(&values)?;
    Ok(Checkpoint { model, epoch: header.epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn cfg() -> ModelConfig {
        ModelConfig { base_channels: 2, ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model(&cfg(), 3).unwrap();
        save_checkpoint(&model, 7, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(&cfg())).unwrap();
        assert_eq!(loaded.epoch, 7);
        let x = Tensor::rand(0f32, 1f32, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let a = model.forward(&x).unwrap().cls_logit.to_vec1::<f32>().unwrap();
        let b = loaded.model.forward(&x).unwrap().cls_logit.to_vec1::<f32>().unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn corruption_and_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&build_model(&cfg(), 3).unwrap(), 0, &path).unwrap();

        let other = ModelConfig { base_channels: 4, ..cfg() };
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
