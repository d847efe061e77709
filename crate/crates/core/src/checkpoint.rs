//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `GQKVACKP` |
//! | 4     | format version (u32, currently 1) |
//! | 4     | header length `L` (u32) |
//! | L     | UTF-8 JSON [`CheckpointHeader`] |
//! | 4·P   | every parameter as f32, in [`ViTWeights::named_params`] order |
//!
//! `P` must equal `count_params(config).total`; loading rejects any other
//! payload length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{count_params, ConfigRecord, ViTConfig, ViTWeights};

pub const MAGIC: &[u8; 8] = b"GQKVACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ConfigRecord,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint<T: Scalar>(cfg: &ViTConfig, w: &ViTWeights<T>) -> Result<Vec<u8>> {
    w.check_against(cfg)?;
    let named = w.named_params();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: cfg.to_record()?,
        param_count: count_params(cfg).total,
        tensors: named.iter().map(|(n, _, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * w.element_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in named {
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ViTConfig, ViTWeights<T>)> {
    let fail = |msg: String| Error::Format(msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body_start = 16 + header_len;
    if bytes.len() < body_start {
        return Err(fail("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])?;
    if header.format_version != version {
        return Err(fail("header version disagrees with preamble".into()));
    }
    let cfg = ViTConfig::from_record(&header.config)?;
    let expected = count_params(&cfg).total;
    let payload = &bytes[body_start..];
    if payload.len() != expected * 4 || header.param_count != expected {
        return Err(fail(format!(
            "payload holds {} bytes, config needs {} parameters ({} bytes)",
            payload.len(),
            expected,
            expected * 4
        )));
    }
    let mut weights = ViTWeights::<T>::zeros(&cfg);
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for t in weights.params_mut() {
        for slot in t.data_mut() {
            *slot = T::from_f64(values.next().expect("length checked") as f64);
        }
        t.ensure_finite("checkpoint").map_err(|e| fail(e.to_string()))?;
    }
    Ok((cfg, weights))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, cfg: &ViTConfig, w: &ViTWeights<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, w)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ViTConfig, ViTWeights<T>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rounds every element through f32, the precision checkpoints store.
pub fn quantize_f32<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::from_f64(v.to_f64() as f32 as f64))
}
