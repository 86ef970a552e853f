//! Checkpoint serialization.
//!
//! Layout: magic "VGQC", u32 LE format version, u64 LE header length, a JSON
//! array of tensor records {name, shape, dtype, offset, len} with offsets and
//! lengths counted in f32 elements, the concatenated little-endian f32
//! payload, and a trailing u32 CRC32 of the payload bytes.
//!
//! The model config and epoch ride along as two reserved records whose names
//! start with "__meta__/"; the config is stored as its JSON bytes widened to
//! f32, which keeps the container format single-dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VgqcError};
use crate::model::{build_model, Model, ModelConfig};
use crate::params::load_values;

pub const MAGIC: [u8; 4] = *b"VGQC";
pub const VERSION: u32 = 1;

const META_CONFIG: &str = "__meta__/config";
const META_EPOCH: &str = "__meta__/epoch";

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

/// Everything a checkpoint holds, decoded.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, epoch: u64) -> Result<()> {
    let mut records = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<f32>| {
        records.push(Record {
            name,
            shape,
            dtype: "f32".into(),
            offset: payload.len() as u64,
            len: data.len() as u64,
        });
        payload.extend_from_slice(data);
    };

    for (name, t) in model.store.iter() {
        push(name.to_string(), t.shape().to_vec(), t.data(), &mut payload);
    }
    let config_bytes = serde_json::to_vec(&model.config)?;
    let config_f32: Vec<f32> = config_bytes.iter().map(|&b| b as f32).collect();
    push(
        META_CONFIG.into(),
        vec![config_f32.len()],
        &config_f32,
        &mut payload,
    );
    push(META_EPOCH.into(), vec![1], &[epoch as f32], &mut payload);

    let header = serde_json::to_vec(&records)?;
    let payload_bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload_bytes);
    let crc = hasher.finalize();

    let mut out = Vec::with_capacity(16 + header.len() + payload_bytes.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload_bytes);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
        bytes
            .get(range)
            .ok_or_else(|| VgqcError::checkpoint("file is truncated"))
    };

    if take(0..4)? != MAGIC {
        return Err(VgqcError::checkpoint("bad magic; not a checkpoint"));
    }
    let version = u32::from_le_bytes(take(4..8)?.try_into().unwrap());
    if version != VERSION {
        return Err(VgqcError::checkpoint(format!(
            "format version {version} is not supported (this build reads {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(take(8..16)?.try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    let records: Vec<Record> = serde_json::from_slice(take(16..header_end)?)?;

    let payload_elems: u64 = records.iter().map(|r| r.offset + r.len).max().unwrap_or(0);
    let payload_len = payload_elems as usize * 4;
    let payload = take(header_end..header_end + payload_len)?;
    let crc_stored = u32::from_le_bytes(
        take(header_end + payload_len..header_end + payload_len + 4)?
            .try_into()
            .unwrap(),
    );
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(payload);
    if hasher.finalize() != crc_stored {
        return Err(VgqcError::checkpoint("payload checksum mismatch; file is corrupted"));
    }

    let mut config = None;
    let mut epoch = 0u64;
    let mut tensors = Vec::new();
    for r in records {
        if r.dtype != "f32" {
            return Err(VgqcError::checkpoint(format!(
                "{}: unsupported dtype {}",
                r.name, r.dtype
            )));
        }
        let start = r.offset as usize * 4;
        let end = start + r.len as usize * 4;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let numel: usize = r.shape.iter().product();
        if numel != data.len() {
            return Err(VgqcError::checkpoint(format!(
                "{}: shape {:?} does not match {} elements",
                r.name,
                r.shape,
                data.len()
            )));
        }
        match r.name.as_str() {
            META_CONFIG => {
                let json: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                config = Some(serde_json::from_slice(&json)?);
            }
            META_EPOCH => epoch = data[0] as u64,
            _ => tensors.push((r.name, r.shape, data)),
        }
    }
    let config =
        config.ok_or_else(|| VgqcError::checkpoint("checkpoint has no config record"))?;
    Ok(Checkpoint {
        config,
        epoch,
        tensors,
    })
}

/// Rebuilds the model and installs the stored weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model<f32>> {
    let mut model = build_model::<f32>(&ckpt.config, 0)?;
    load_values(&mut model.store, &ckpt.tensors)?;
    Ok(model)
}
